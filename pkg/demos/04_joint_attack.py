# %% [markdown]
# # Attacking a defended edge
#
# The attacker owns a copy of the defended edge and trains only a new head
# on top of the noisy activations to predict a private binary attribute.

# %%
from splitpriv.attack import build_head, build_joint, edge_digest, random_baseline, train_attack
from splitpriv.data import generate_synthetic, split_train_val
from splitpriv.defense import calibrate_gaussian, gaussian_defense
from splitpriv.metrics import compute_pi
from splitpriv.modelgraph import TensorSpec, build_model
from splitpriv.splitter import find_cut, split
from splitpriv.trainer import TrainConfig, train

user, _ = generate_synthetic(seed=0, n=1200)
_, attacker = generate_synthetic(seed=1, n=1200)
u_train, u_val = split_train_val(user, 0.2, seed=0)
a_train, a_val = split_train_val(attacker, 0.2, seed=1)

graph, params = build_model("mini5", TensorSpec((1, 28, 28)), 10, seed=0)
train(graph, params, u_train, TrainConfig(lr=0.02, epochs=4), val_set=u_val)
s = split(graph, params, find_cut(graph, "conv4"))
sigma = calibrate_gaussian(s, u_val, 0.95, seed=0).sigma

# %%
cfg = TrainConfig(lr=0.02, epochs=3)
clean = build_joint(s, gaussian_defense(s.interface_spec.shape, 0.0), build_head("cloud_clone", s, 2))
acc_a = train_attack(clean, a_train, a_val, cfg)

joint = build_joint(s, gaussian_defense(s.interface_spec.shape, sigma), build_head("cloud_clone", s, 2))
before = edge_digest(joint)
acc_a_prime = train_attack(joint, a_train, a_val, cfg)
assert edge_digest(joint) == before  # the edge and the noise never move

# %% [markdown]
# Privacy index: 0 means the defense did not slow the attacker at all,
# 1 means it pushed them down to guessing.

# %%
acc_r = random_baseline(a_val.labels)
pi, raw = compute_pi(acc_a, acc_a_prime, acc_r)
print(f"attack without noise {acc_a:.3f}, with noise {acc_a_prime:.3f}, PI {pi:.3f}")
