"""End-to-end model: configuration, parameters, forward pass and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"SFCK" | version u32 | entry count u32
    per entry: name length u16 | UTF-8 name | rank u8 | rank x u32 dims | float32 values

Model configuration is stored as rank-0 entries named ``config.<field>``.
"""

import math
import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import CheckpointError, ContractError
from .fusion import early_fuse, fuse_features, init_fusion_params, sample_rgb_nearest
from .geometry import knn_search, project_points
from .image_features import fpn_forward, init_fpn_params, sample_at_projections
from .numerics import Tensor
from .ot import OFFSET, OTParams, cost_matrix, displacement_mask, initial_flow, sinkhorn
from .point_features import CHANNELS, extract_point_features, init_point_feature_params
from .refinement import init_refine_params, refine_flow

MAGIC = b"SFCK"
VERSION = 1
FUSION_MODES = ("late", "early", "none")


@dataclass(frozen=True)
class ModelConfig:
    knn: int = 32
    sinkhorn_k: int = 1
    d_max: float = 10.0
    fusion: str = "late"  # late | early | none (point-only)
    mlps: int = 1
    edge_mlp_depth: int = 1
    fpn_convs: int = 1
    offsets_only: bool = False
    pin_epsilon: float = -1.0  # > 0.03 freezes epsilon at that value
    pin_lambda: float = -1.0

    def __post_init__(self):
        if self.fusion not in FUSION_MODES:
            raise ContractError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.mlps not in (1, 2):
            raise ContractError(f"mlps must be 1 or 2, got {self.mlps}")
        if self.knn < 1 or self.sinkhorn_k < 1 or self.edge_mlp_depth < 1 or self.fpn_convs < 1:
            raise ContractError("knn, sinkhorn_k, edge_mlp_depth and fpn_convs must be >= 1")
        for name in ("pin_epsilon", "pin_lambda"):
            v = getattr(self, name)
            if v != -1.0 and not v > OFFSET:
                raise ContractError(f"{name} must exceed {OFFSET} (or be -1 for learned), got {v}")

    @classmethod
    def paper(cls, **overrides):
        """Three-layer edge MLPs and two convolutions per pyramid level."""
        return replace(cls(edge_mlp_depth=3, fpn_convs=2), **overrides)

    def encode(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = float(FUSION_MODES.index(v)) if f.name == "fusion" else float(v)
        return out

    @classmethod
    def decode(cls, values):
        kwargs = {}
        for f in fields(cls):
            if f.name not in values:
                raise CheckpointError(f"checkpoint lacks config entry config.{f.name}")
            v = values[f.name]
            if f.name == "fusion":
                if v not in (0.0, 1.0, 2.0):
                    raise CheckpointError(f"invalid fusion code {v}")
                kwargs[f.name] = FUSION_MODES[int(v)]
            elif f.type in (int, "int"):
                kwargs[f.name] = int(v)
            elif f.type in (bool, "bool"):
                kwargs[f.name] = bool(v)
            else:
                kwargs[f.name] = float(v)
        return cls(**kwargs)


@dataclass
class FlowField:
    flow: Tensor
    unmatched: np.ndarray
    initial: Tensor = None

    def numpy(self):
        return self.flow.data


class ModelParams:
    """Named parameter tensors plus the model configuration."""

    def __init__(self, config: ModelConfig, tensors):
        self.config = config
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return sorted(self.tensors)

    def trainable(self):
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def count_parameters(self):
        return sum(t.size for t in self.trainable().values())

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def group(self, prefix):
        p = prefix + "."
        return {k: t for k, t in self.tensors.items() if k.startswith(p)}

    def _stack(self, prefix):
        blocks, b = [], 0
        while f"{prefix}.block{b}.fc0.weight" in self.tensors:
            layer, d = [], 0
            while f"{prefix}.block{b}.fc{d}.weight" in self.tensors:
                layer.append((self.tensors[f"{prefix}.block{b}.fc{d}.weight"],
                              self.tensors[f"{prefix}.block{b}.fc{d}.bias"]))
                d += 1
            blocks.append(layer)
            b += 1
        return blocks

    def point_blocks(self):
        return self._stack("point_features")

    def refine_blocks(self):
        return self._stack("refine")

    def refine_head(self):
        return self.tensors["refine.head.weight"], self.tensors["refine.head.bias"]

    def fpn_levels(self):
        levels, lv = [], 0
        while f"fpn.level{lv}.conv0.weight" in self.tensors:
            level, c = [], 0
            while f"fpn.level{lv}.conv{c}.weight" in self.tensors:
                level.append((self.tensors[f"fpn.level{lv}.conv{c}.weight"],
                              self.tensors[f"fpn.level{lv}.conv{c}.bias"]))
                c += 1
            levels.append(level)
            lv += 1
        return levels

    def fusion_layers(self):
        out, d = [], 0
        while f"fusion.fc{d}.weight" in self.tensors:
            out.append((self.tensors[f"fusion.fc{d}.weight"], self.tensors[f"fusion.fc{d}.bias"]))
            d += 1
        return out

    def ot(self) -> OTParams:
        return OTParams(self.tensors["ot.log_epsilon"], self.tensors["ot.log_lambda"], OFFSET,
                        self.config.sinkhorn_k, self.config.d_max)

    def copy(self):
        return ModelParams(self.config, {
            k: Tensor(t.data.copy(), requires_grad=t.requires_grad) for k, t in self.tensors.items()
        })


def _point_input_channels(config):
    base = 0 if config.offsets_only else 3
    return base + (3 if config.fusion == "early" else 0)


def _add_stack(tensors, prefix, blocks):
    for b, layer in enumerate(blocks):
        for d, (w, bias) in enumerate(layer):
            tensors[f"{prefix}.block{b}.fc{d}.weight"] = w
            tensors[f"{prefix}.block{b}.fc{d}.bias"] = bias


def init_params(seed, config: ModelConfig = ModelConfig()) -> ModelParams:
    """Weights uniform in +-sqrt(1/fan_in), zero biases, zero refinement head, log eps = log lambda = 0."""
    rng = np.random.default_rng(seed)
    tensors = {}
    _add_stack(tensors, "point_features", init_point_feature_params(
        rng, _point_input_channels(config), CHANNELS, config.edge_mlp_depth))
    if config.fusion == "late":
        for lv, level in enumerate(init_fpn_params(rng, convs_per_level=config.fpn_convs)):
            for c, (w, b) in enumerate(level):
                tensors[f"fpn.level{lv}.conv{c}.weight"] = w
                tensors[f"fpn.level{lv}.conv{c}.bias"] = b
        for d, (w, b) in enumerate(init_fusion_params(rng, CHANNELS[-1] + 128, config.mlps)):
            tensors[f"fusion.fc{d}.weight"] = w
            tensors[f"fusion.fc{d}.bias"] = b
    blocks, (hw, hb) = init_refine_params(rng, CHANNELS, config.edge_mlp_depth)
    _add_stack(tensors, "refine", blocks)
    tensors["refine.head.weight"] = hw
    tensors["refine.head.bias"] = hb
    tensors["ot.log_epsilon"] = Tensor(0.0, requires_grad=True)
    tensors["ot.log_lambda"] = Tensor(0.0, requires_grad=True)
    params = ModelParams(config, tensors)
    _apply_pins(params)
    return params


def _apply_pins(params):
    for key, pin in (("ot.log_epsilon", params.config.pin_epsilon), ("ot.log_lambda", params.config.pin_lambda)):
        if pin != -1.0:
            params.tensors[key] = Tensor(math.log(pin - OFFSET), requires_grad=False)


# -------------------------------------------------------------------- forward


@dataclass
class SceneInputs:
    """Parameter-independent per-scene quantities (graphs, projections, gate)."""

    pc_t: np.ndarray
    pc_t1: np.ndarray
    img_t: np.ndarray
    img_t1: np.ndarray
    graph_t: object
    graph_t1: object
    proj_t: tuple
    proj_t1: tuple
    gate: np.ndarray
    initial_t: object
    initial_t1: object


def prepare_inputs(scene, config: ModelConfig) -> SceneInputs:
    pc_t = np.asarray(scene.pc_t, dtype=np.float64)
    pc_t1 = np.asarray(scene.pc_t1, dtype=np.float64)
    proj_t = project_points(pc_t, scene.cam)
    proj_t1 = project_points(pc_t1, scene.cam)

    def initial(pc, img, proj):
        if config.fusion == "early":
            x = early_fuse(pc, sample_rgb_nearest(img, *proj))
            return x[:, 3:] if config.offsets_only else x
        return np.zeros((len(pc), 0)) if config.offsets_only else None

    return SceneInputs(
        pc_t, pc_t1, scene.img_t, scene.img_t1,
        knn_search(pc_t, config.knn), knn_search(pc_t1, config.knn),
        proj_t, proj_t1, displacement_mask(pc_t, pc_t1, config.d_max),
        initial(pc_t, scene.img_t, proj_t), initial(pc_t1, scene.img_t1, proj_t1),
    )


def frame_features(params: ModelParams, pc, img, proj, graph, initial=None):
    """Matching features of one frame (shared weights across frames)."""
    feats = extract_point_features(pc, params.point_blocks(), graph, initial)
    if params.config.fusion != "late":
        return feats
    fmap = fpn_forward(img, params.fpn_levels())
    rgb = sample_at_projections(fmap, *proj)
    return fuse_features(feats, rgb, params.fusion_layers())


def forward(scene, params: ModelParams, inputs: SceneInputs = None):
    """Flow for every point of ``scene.pc_t``; returns ``(FlowField, TransportPlan)``."""
    x = inputs if inputs is not None else prepare_inputs(scene, params.config)
    f_t = frame_features(params, x.pc_t, x.img_t, x.proj_t, x.graph_t, x.initial_t)
    f_t1 = frame_features(params, x.pc_t1, x.img_t1, x.proj_t1, x.graph_t1, x.initial_t1)
    cost, _ = cost_matrix(f_t, f_t1, x.pc_t, x.pc_t1, d_max=None)
    plan = sinkhorn(cost, x.gate, params.ot())
    sf0, unmatched = initial_flow(plan, x.pc_t, x.pc_t1)
    flow, _ = refine_flow(sf0, x.pc_t, x.graph_t, params.refine_blocks(), params.refine_head())
    return FlowField(flow, unmatched, sf0), plan


# ---------------------------------------------------------------- checkpoints


def _entries(params: ModelParams):
    out = [(f"config.{k}", np.array(v, dtype=np.float64)) for k, v in params.config.encode().items()]
    out += [(name, params.tensors[name].data) for name in params.names()]
    return sorted(out, key=lambda e: e[0])


def check_checkpointable(config: ModelConfig):
    """Raise CheckpointError unless every config value survives a float32 round trip."""
    for key, value in config.encode().items():
        if float(np.float32(value)) != value:
            raise CheckpointError(f"config.{key}={value!r} is not exactly representable as float32")


def checkpoint_bytes(params: ModelParams) -> bytes:
    check_checkpointable(params.config)
    entries = _entries(params)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(chunks)


def save_checkpoint(params: ModelParams, path):
    data = checkpoint_bytes(params)
    with open(path, "wb") as fh:
        fh.write(data)


def _take(buf, pos, n, what):
    if pos + n > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
    return buf[pos : pos + n], pos + n


def parse_checkpoint(buf: bytes):
    """Decode raw entries: ``{name: float64 array}`` in file order."""
    head, pos = _take(buf, 0, 4, "magic")
    if head != MAGIC:
        raise CheckpointError(f"bad magic {head!r}: expected {MAGIC!r}")
    raw, pos = _take(buf, pos, 8, "header")
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {VERSION}")
    entries = {}
    for _ in range(count):
        raw, pos = _take(buf, pos, 2, "name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, nlen, "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"entry name at byte {pos - nlen} is not UTF-8") from None
        if name in entries:
            raise CheckpointError(f"duplicate entry name {name!r}")
        raw, pos = _take(buf, pos, 1, f"rank of {name}")
        rank = raw[0]
        raw, pos = _take(buf, pos, 4 * rank, f"dims of {name}")
        dims = struct.unpack(f"<{rank}I", raw)
        n = int(np.prod(dims, dtype=np.int64))
        raw, pos = _take(buf, pos, 4 * n, f"values of {name}")
        entries[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last entry")
    return entries


def params_from_entries(entries) -> ModelParams:
    cfg_values = {k[len("config."):]: float(v) for k, v in entries.items() if k.startswith("config.")}
    try:
        config = ModelConfig.decode(cfg_values)
    except ContractError as exc:
        raise CheckpointError(f"invalid configuration: {exc}") from None
    template = init_params(0, config)
    tensors = {k: v for k, v in entries.items() if not k.startswith("config.")}
    if set(tensors) != set(template.tensors):
        missing = sorted(set(template.tensors) - set(tensors))
        extra = sorted(set(tensors) - set(template.tensors))
        raise CheckpointError(f"tensor names do not match the configuration (missing {missing}, extra {extra})")
    out = {}
    for name, ref in template.tensors.items():
        if tensors[name].shape != ref.shape:
            raise CheckpointError(f"{name}: shape {tensors[name].shape}, expected {ref.shape}")
        out[name] = Tensor(tensors[name], requires_grad=ref.requires_grad)
    params = ModelParams(config, out)
    _apply_pins(params)  # pins are exact in float64, not as stored float32
    return params


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_entries(parse_checkpoint(fh.read()))
