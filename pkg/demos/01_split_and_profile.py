# %% [markdown]
# # Where to cut a network
#
# A model is split at a cut point: the edge device runs the layers up to the
# cut, the cloud runs the rest.  Composition must reproduce the full model.

# %%
import numpy as np

from splitpriv.modelgraph import TensorSpec, build_model, predict, profile
from splitpriv.splitter import edge_ratio, enumerate_cutpoints, split

graph, params = build_model("mini5", TensorSpec((1, 28, 28)), num_classes=10, seed=0)
for layer in profile(graph):
    print(f"{layer.name:8s} params={layer.params:7d} flops={layer.flops:10d} out={layer.output_spec.shape}")

# %% [markdown]
# Each conv layer (with its activation and pooling) is a candidate cut.  The
# edge share of FLOPs grows quickly while parameters stay in the classifier.

# %%
for cut in enumerate_cutpoints(graph):
    r = edge_ratio(graph, cut)
    print(f"{cut.label}: flops {r['flops_ratio']:.3f}  params {r['params_ratio']:.3f}")

# %%
x = np.random.default_rng(0).random((8, 1, 28, 28), dtype=np.float32)
full = predict(graph, params, x)
s = split(graph, params, enumerate_cutpoints(graph)[2])
composed = predict(s.cloud, s.cloud_params, predict(s.edge, s.edge_params, x))
print("interface", s.interface_spec.shape, "max deviation", np.abs(full - composed).max())
