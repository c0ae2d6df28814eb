"""DNN graph representation, shape inference and benchmark model builders.

Weights carry no values: only shapes and bit-widths matter to the compiler.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import CycleError, NotMappable, ParseError, ShapeError, UnknownModel

FORMAT_VERSION = 1
KINDS = ("Conv", "Linear", "Pool", "BatchNorm", "Activation", "ElementwiseAdd", "Concat", "Flatten")
MAPPABLE = ("Conv", "Linear")
BENCHMARKS = ("vgg16", "resnet18", "squeezenet")

Shape = tuple


@dataclass(frozen=True)
class LayerNode:
    id: int
    kind: str
    attrs: dict = field(default_factory=dict)
    inputs: tuple = ()
    weight_bits_per_element: int = 4
    name: str = ""

    @property
    def mappable(self) -> bool:
        return self.kind in MAPPABLE


@dataclass(frozen=True)
class LayerStats:
    weight_bits: int
    rows: int
    cols_cells: int
    mvm_invocations_per_sample: int


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    name: str
    input_shape: Shape
    nodes: tuple  # LayerNode, topological order
    shapes: dict = field(default_factory=dict)  # node id -> output shape

    def __post_init__(self):
        by_id = {n.id: n for n in self.nodes}
        consumers: dict = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                consumers[src].append(n.id)
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_consumers", {k: tuple(v) for k, v in consumers.items()})
        object.__setattr__(self, "_position", {n.id: i for i, n in enumerate(self.nodes)})

    def __eq__(self, other):
        if not isinstance(other, NetworkGraph):
            return NotImplemented
        return (
            self.name == other.name
            and tuple(self.input_shape) == tuple(other.input_shape)
            and self.nodes == other.nodes
        )

    def node(self, node_id: int) -> LayerNode:
        return self._by_id[node_id]

    def consumers(self, node_id: int) -> tuple:
        return self._consumers[node_id]

    def position(self, node_id: int) -> int:
        return self._position[node_id]

    def input_of(self, node_id: int) -> Shape:
        node = self._by_id[node_id]
        if not node.inputs:
            return tuple(self.input_shape)
        return self.shapes[node.inputs[0]]

    def mappable_nodes(self) -> list:
        return [n for n in self.nodes if n.mappable]

    @property
    def sources(self) -> list:
        return [n.id for n in self.nodes if not n.inputs]

    @property
    def sinks(self) -> list:
        return [n.id for n in self.nodes if not self._consumers[n.id]]


def _elements(shape: Shape) -> int:
    return math.prod(shape)


def tensor_bytes(shape: Shape, bits: int) -> int:
    return -(-_elements(shape) * bits // 8)


def _conv_out(size, k, stride, pad, ceil_mode=False):
    span = size + 2 * pad - k
    if span < 0:
        return 0
    if ceil_mode:
        out = -(-span // stride) + 1
        # last window must start inside the (left-padded) input
        if (out - 1) * stride >= size + pad:
            out -= 1
        return out
    return span // stride + 1


def _infer(node: LayerNode, in_shapes: list) -> Shape:
    a = node.attrs
    kind = node.kind
    if kind in ("Conv", "Pool"):
        if len(in_shapes) != 1 or len(in_shapes[0]) != 3:
            raise ShapeError(f"node {node.id} ({kind}) needs one (C,H,W) input, got {in_shapes}")
        c, h, w = in_shapes[0]
        if kind == "Conv":
            if c != a["cin"]:
                raise ShapeError(f"node {node.id}: cin={a['cin']} but producer has {c} channels")
            kh, kw = a["kh"], a["kw"]
            s, p = a.get("stride", 1), a.get("padding", 0)
            oh, ow = _conv_out(h, kh, s, p), _conv_out(w, kw, s, p)
            cout = a["cout"]
        else:
            if a.get("global"):
                return (c, 1, 1)
            k, s, p = a["window"], a.get("stride", a["window"]), a.get("padding", 0)
            oh = _conv_out(h, k, s, p, a.get("ceil_mode", False))
            ow = _conv_out(w, k, s, p, a.get("ceil_mode", False))
            cout = c
        if oh < 1 or ow < 1:
            raise ShapeError(f"node {node.id} ({kind}) produces empty output from {in_shapes[0]}")
        return (cout, oh, ow)
    if kind == "Linear":
        if len(in_shapes) != 1 or len(in_shapes[0]) != 1:
            raise ShapeError(f"node {node.id} (Linear) needs one flat input, got {in_shapes}")
        if in_shapes[0][0] != a["cin"]:
            raise ShapeError(f"node {node.id}: cin={a['cin']} but producer has {in_shapes[0][0]} features")
        return (a["cout"],)
    if kind in ("BatchNorm", "Activation"):
        if len(in_shapes) != 1:
            raise ShapeError(f"node {node.id} ({kind}) needs exactly one input")
        return in_shapes[0]
    if kind == "Flatten":
        if len(in_shapes) != 1:
            raise ShapeError(f"node {node.id} (Flatten) needs exactly one input")
        return (_elements(in_shapes[0]),)
    if kind == "ElementwiseAdd":
        if len(in_shapes) < 2 or any(s != in_shapes[0] for s in in_shapes):
            raise ShapeError(f"node {node.id} (ElementwiseAdd) has mismatched inputs {in_shapes}")
        return in_shapes[0]
    if kind == "Concat":
        if len(in_shapes) < 2 or any(len(s) != 3 or s[1:] != in_shapes[0][1:] for s in in_shapes):
            raise ShapeError(f"node {node.id} (Concat) has mismatched inputs {in_shapes}")
        return (sum(s[0] for s in in_shapes),) + tuple(in_shapes[0][1:])
    raise ParseError(f"node {node.id}: unknown kind {kind!r}")


_REQUIRED = {
    "Conv": ("cin", "cout", "kh", "kw"),
    "Linear": ("cin", "cout"),
    "Pool": ("mode",),
}


def _check_node(node: LayerNode) -> None:
    if node.kind not in KINDS:
        raise ParseError(f"node {node.id}: unknown kind {node.kind!r}")
    for key in _REQUIRED.get(node.kind, ()):
        if key not in node.attrs:
            raise ParseError(f"node {node.id} ({node.kind}) missing attribute {key!r}")
    if node.kind == "Pool" and not node.attrs.get("global") and "window" not in node.attrs:
        raise ParseError(f"node {node.id} (Pool) needs 'window' unless global")
    if node.mappable and (node.attrs["cin"] < 1 or node.attrs["cout"] < 1):
        raise ParseError(f"node {node.id}: cin and cout must be >= 1")
    if node.weight_bits_per_element < 1:
        raise ParseError(f"node {node.id}: weight_bits_per_element must be >= 1")


def build_graph(name: str, input_shape: Iterable[int], nodes: Iterable[LayerNode]) -> NetworkGraph:
    """Validate nodes, order them topologically and infer every shape."""
    nodes = list(nodes)
    by_id = {}
    for n in nodes:
        if n.id in by_id:
            raise ParseError(f"duplicate node id {n.id}")
        _check_node(n)
        by_id[n.id] = n
    for n in nodes:
        for src in n.inputs:
            if src not in by_id:
                raise ParseError(f"node {n.id} references missing node {src}")

    # Kahn's algorithm, ties broken by file position
    index = {n.id: i for i, n in enumerate(nodes)}
    indegree = {n.id: len(set(n.inputs)) for n in nodes}
    consumers: dict = {n.id: [] for n in nodes}
    for n in nodes:
        for src in set(n.inputs):
            consumers[src].append(n.id)
    ready = [(index[i], i) for i, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        _, nid = heapq.heappop(ready)
        order.append(by_id[nid])
        for c in consumers[nid]:
            indegree[c] -= 1
            if indegree[c] == 0:
                heapq.heappush(ready, (index[c], c))
    if len(order) != len(nodes):
        stuck = sorted(i for i, d in indegree.items() if d > 0)
        raise CycleError(f"graph has a cycle through nodes {stuck}")

    sources = [n.id for n in order if not n.inputs]
    if len(sources) != 1:
        raise ParseError(f"expected exactly one source node, found {sources}")

    input_shape = tuple(int(x) for x in input_shape)
    shapes = {}
    for n in order:
        in_shapes = [shapes[s] for s in n.inputs] if n.inputs else [input_shape]
        shapes[n.id] = _infer(n, in_shapes)
    return NetworkGraph(name=name, input_shape=input_shape, nodes=tuple(order), shapes=shapes)


def layer_stats(graph: NetworkGraph, node_id: int, cell_bits: int = 1) -> LayerStats:
    node = graph.node(node_id)
    if not node.mappable:
        raise NotMappable(f"node {node_id} is {node.kind}, not Conv/Linear")
    a = node.attrs
    wb = node.weight_bits_per_element
    if node.kind == "Conv":
        rows = a["cin"] * a["kh"] * a["kw"]
        _, oh, ow = graph.shapes[node_id]
        invocations = oh * ow
    else:
        rows = a["cin"]
        invocations = 1
    cells_per_weight = -(-wb // cell_bits)
    return LayerStats(
        weight_bits=rows * a["cout"] * wb,
        rows=rows,
        cols_cells=a["cout"] * cells_per_weight,
        mvm_invocations_per_sample=invocations,
    )


def weight_footprint_mib(graph: NetworkGraph) -> dict:
    """Bias-free weight footprint in MiB, split by layer kind."""
    out = {"Conv": 0.0, "Linear": 0.0}
    for n in graph.mappable_nodes():
        out[n.kind] += layer_stats(graph, n.id).weight_bits / 8 / 2**20
    out["Total"] = out["Conv"] + out["Linear"]
    return out


# -- serialization ---------------------------------------------------------------


def graph_to_dict(graph: NetworkGraph) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "name": n.name,
                "attrs": dict(n.attrs),
                "inputs": list(n.inputs),
                "weight_bits_per_element": n.weight_bits_per_element,
            }
            for n in graph.nodes
        ],
    }


def graph_from_dict(doc: dict) -> NetworkGraph:
    if not isinstance(doc, dict):
        raise ParseError("network document must be an object")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {doc.get('format_version')!r}")
    try:
        nodes = [
            LayerNode(
                id=int(d["id"]),
                kind=d["kind"],
                attrs=dict(d.get("attrs", {})),
                inputs=tuple(int(i) for i in d.get("inputs", [])),
                weight_bits_per_element=int(d.get("weight_bits_per_element", 4)),
                name=d.get("name", ""),
            )
            for d in doc["nodes"]
        ]
        return build_graph(doc.get("name", "network"), doc["input_shape"], nodes)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed network document: {exc!r}") from exc


def dump_network(graph: NetworkGraph) -> str:
    return json.dumps(graph_to_dict(graph), indent=1) + "\n"


def load_network(path) -> NetworkGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc}") from exc
    return graph_from_dict(doc)


def save_network(graph: NetworkGraph, path) -> None:
    Path(path).write_text(dump_network(graph))


# -- builders --------------------------------------------------------------------


class GraphBuilder:
    """Append-only helper for writing models layer by layer."""

    def __init__(self, name, input_shape, weight_bits=4):
        self.name = name
        self.input_shape = tuple(input_shape)
        self.weight_bits = weight_bits
        self.nodes: list = []

    def _add(self, kind, inputs, name="", **attrs):
        nid = len(self.nodes)
        inputs = tuple(i for i in inputs if i is not None)
        self.nodes.append(LayerNode(nid, kind, attrs, inputs, self.weight_bits, name))
        return nid

    def conv(self, x, cin, cout, k, stride=1, padding=0, name=""):
        return self._add("Conv", [x], name, cin=cin, cout=cout, kh=k, kw=k, stride=stride, padding=padding)

    def linear(self, x, cin, cout, name=""):
        return self._add("Linear", [x], name, cin=cin, cout=cout)

    def relu(self, x, name=""):
        return self._add("Activation", [x], name, fn="relu")

    def bn(self, x, name=""):
        return self._add("BatchNorm", [x], name)

    def pool(self, x, window, stride=None, padding=0, mode="max", ceil_mode=False, name=""):
        return self._add(
            "Pool", [x], name, window=window, stride=stride or window, padding=padding,
            mode=mode, ceil_mode=ceil_mode,
        )

    def global_pool(self, x, name=""):
        return self._add("Pool", [x], name, mode="avg", **{"global": True})

    def flatten(self, x, name=""):
        return self._add("Flatten", [x], name)

    def add(self, *xs, name=""):
        return self._add("ElementwiseAdd", xs, name)

    def concat(self, *xs, name=""):
        return self._add("Concat", xs, name)

    def build(self) -> NetworkGraph:
        return build_graph(self.name, self.input_shape, self.nodes)


def vgg16() -> NetworkGraph:
    g = GraphBuilder("vgg16", (3, 224, 224))
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    x, cin = None, 3
    for i, v in enumerate(cfg):
        if v == "M":
            x = g.pool(x, 2, name=f"pool{i}")
        else:
            x = g.conv(x, cin, v, 3, padding=1, name=f"conv{i}")
            x = g.relu(x)
            cin = v
    x = g.flatten(x)
    x = g.relu(g.linear(x, 512 * 7 * 7, 4096, name="fc1"))
    x = g.relu(g.linear(x, 4096, 4096, name="fc2"))
    g.linear(x, 4096, 1000, name="fc3")
    return g.build()


def resnet18() -> NetworkGraph:
    g = GraphBuilder("resnet18", (3, 224, 224))
    x = g.relu(g.bn(g.conv(None, 3, 64, 7, stride=2, padding=3, name="conv1")))
    x = g.pool(x, 3, stride=2, padding=1, name="maxpool")
    cin = 64
    for stage, cout in enumerate((64, 128, 256, 512), start=1):
        for block in range(2):
            stride = 2 if stage > 1 and block == 0 else 1
            tag = f"layer{stage}.{block}"
            y = g.relu(g.bn(g.conv(x, cin, cout, 3, stride, 1, name=f"{tag}.conv1")))
            y = g.bn(g.conv(y, cout, cout, 3, 1, 1, name=f"{tag}.conv2"))
            skip = x
            if stride != 1 or cin != cout:
                skip = g.bn(g.conv(x, cin, cout, 1, stride, 0, name=f"{tag}.downsample"))
            x = g.relu(g.add(y, skip))
            cin = cout
    x = g.flatten(g.global_pool(x))
    g.linear(x, 512, 1000, name="fc")
    return g.build()


def squeezenet() -> NetworkGraph:
    """SqueezeNet 1.1; the classifier is a 1x1 convolution."""
    g = GraphBuilder("squeezenet", (3, 224, 224))

    def fire(x, cin, squeeze, expand, tag):
        s = g.relu(g.conv(x, cin, squeeze, 1, name=f"{tag}.squeeze"))
        e1 = g.relu(g.conv(s, squeeze, expand, 1, name=f"{tag}.expand1x1"))
        e3 = g.relu(g.conv(s, squeeze, expand, 3, padding=1, name=f"{tag}.expand3x3"))
        return g.concat(e1, e3)

    x = g.relu(g.conv(None, 3, 64, 3, stride=2, name="conv1"))
    x = g.pool(x, 3, 2, ceil_mode=True)
    x = fire(x, 64, 16, 64, "fire2")
    x = fire(x, 128, 16, 64, "fire3")
    x = g.pool(x, 3, 2, ceil_mode=True)
    x = fire(x, 128, 32, 128, "fire4")
    x = fire(x, 256, 32, 128, "fire5")
    x = g.pool(x, 3, 2, ceil_mode=True)
    x = fire(x, 256, 48, 192, "fire6")
    x = fire(x, 384, 48, 192, "fire7")
    x = fire(x, 384, 64, 256, "fire8")
    x = fire(x, 512, 64, 256, "fire9")
    x = g.relu(g.conv(x, 512, 1000, 1, name="classifier"))
    g.flatten(g.global_pool(x))
    return g.build()


_BUILDERS = {"vgg16": vgg16, "resnet18": resnet18, "squeezenet": squeezenet}


def build_benchmark(name: str) -> NetworkGraph:
    try:
        return _BUILDERS[name.lower()]()
    except KeyError:
        raise UnknownModel(f"unknown model {name!r}; expected one of {', '.join(BENCHMARKS)}") from None


def resolve_network(name_or_path: str) -> NetworkGraph:
    if name_or_path.lower() in _BUILDERS:
        return build_benchmark(name_or_path)
    if Path(name_or_path).exists():
        return load_network(name_or_path)
    raise UnknownModel(f"{name_or_path!r} is neither a builtin model nor a readable file")
