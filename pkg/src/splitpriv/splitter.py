"""Cut-point enumeration, edge/cloud partitioning and edge-side cost ratios."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .modelgraph import ModelGraph, ParamStore, TensorSpec, profile

# layers that stay with the conv they follow
_GROUP_TAIL = ("batchnorm2d", "relu", "maxpool2d")


@dataclass(frozen=True)
class CutPoint:
    index: int  # top-level layer index after which the model is cut
    label: str


@dataclass
class SplitModel:
    edge: ModelGraph
    edge_params: ParamStore
    cloud: ModelGraph
    cloud_params: ParamStore
    cut: CutPoint

    @property
    def interface_spec(self) -> TensorSpec:
        return self.cloud.input_spec


def enumerate_cutpoints(graph: ModelGraph) -> list[CutPoint]:
    """Legal cuts, shallow to deep.

    Graphs with residual blocks are cut only at block boundaries; otherwise a
    cut follows each conv together with its trailing batchnorm/relu/pool group.
    """
    layers = graph.layers
    if any(l.kind == "residual_block" for l in layers):
        blocks = [i for i, l in enumerate(layers) if l.kind == "residual_block"]
        return [CutPoint(i, f"block{n}") for n, i in enumerate(blocks, 1)]
    cuts = []
    n = 0
    for i, layer in enumerate(layers):
        if layer.kind != "conv2d":
            continue
        end = i
        while end + 1 < len(layers) and layers[end + 1].kind in _GROUP_TAIL:
            end += 1
        n += 1
        cuts.append(CutPoint(end, f"conv{n}"))
    return cuts


def find_cut(graph: ModelGraph, label: str) -> CutPoint:
    for cut in enumerate_cutpoints(graph):
        if cut.label == label:
            return cut
    raise ShapeError(f"no cut labelled {label!r}; available: {[c.label for c in enumerate_cutpoints(graph)]}")


def _layer_prefixes(layers) -> list[str]:
    return [l.name for l in layers]


def split(graph: ModelGraph, params: ParamStore, cut: CutPoint) -> SplitModel:
    if cut not in enumerate_cutpoints(graph):
        raise ShapeError(f"invalid cut {cut}")
    head, tail = graph.layers[: cut.index + 1], graph.layers[cut.index + 1:]
    edge = ModelGraph(head, graph.input_spec, None)
    interface = TensorSpec(edge.output_shapes[-1], graph.input_spec.dtype if graph.input_spec.dtype != "uint8"
                           else "float32")
    cloud = ModelGraph(tail, interface, graph.num_classes)
    return SplitModel(edge, params.subset(_layer_prefixes(head)), cloud, params.subset(_layer_prefixes(tail)), cut)


def edge_ratio(graph: ModelGraph, cut: CutPoint) -> dict[str, float]:
    """Share of FLOPs and parameters that run on the edge device for this cut."""
    prof = profile(graph)
    edge = prof[: cut.index + 1]
    total_f = sum(p.flops for p in prof)
    total_p = sum(p.params for p in prof)
    return {
        "flops_ratio": sum(p.flops for p in edge) / total_f if total_f else 0.0,
        "params_ratio": sum(p.params for p in edge) / total_p if total_p else 0.0,
    }
