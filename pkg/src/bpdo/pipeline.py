"""Configuration, checkpoints, training, and detection glue.

The fit loop trains the attention fusion and the point-refinement stage
end to end on synthetic corpora with plain gradient descent plus momentum
(0.9). During training, refinement starts from proposals extracted from the
ground-truth distance map (stable supervision for the matching loss); at
detection time proposals come from the predicted distance map.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data_io, dom as dom_mod, geometry, losses, priors, proposal, tam as tam_mod
from .autodiff import LinearParams, Tensor, as_tensor
from .errors import ConfigError, FitAbortError, InvalidInputError
from .fields import TensorField
from .geometry import BoundaryPoints
from .proposal import ProposalConfig

CKPT_MAGIC = b"BPCK"
CKPT_VERSION = "bpdo-checkpoint-1"


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class DomConfig:
    m_heads: int = 8
    n_samples: int = 3
    t_iters: int = 3
    r_max: float = 8.0
    hidden: int = 64
    share_iteration_params: bool = True


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 3.0
    gamma: float = 0.1
    include_background: bool = False


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 1e-3
    epochs: int = 200
    batch_size: int = 4
    seed: int = 0
    momentum: float = 0.9


@dataclass(frozen=True)
class PipelineConfig:
    c_channels: int = 32
    rows: int = 128
    cols: int = 128
    # gate the predicted distance map by the predicted text mask before
    # binarization; keeps out-of-text distance noise from spawning proposals
    detect_gate_by_cls: bool = True
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    dom: DomConfig = field(default_factory=DomConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    fit: FitConfig = field(default_factory=FitConfig)

    def __post_init__(self):
        if min(self.c_channels, self.rows, self.cols) < 1:
            raise ConfigError("c_channels, rows, cols must be positive")
        for name in ("epochs", "batch_size"):
            if getattr(self.fit, name) < 1:
                raise ConfigError(f"fit.{name} must be positive")

    # ---- key-value text serialization (documented in the README) ----
    def to_text(self) -> str:
        lines = ["# pipeline configuration: dotted key = value per line"]
        for key, value in sorted(self.flatten().items()):
            if isinstance(value, bool):
                value = "true" if value else "false"
            else:
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    def flatten(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if dataclasses.is_dataclass(v):
                for sub in dataclasses.fields(v):
                    out[f"{f.name}.{sub.name}"] = getattr(v, sub.name)
            else:
                out[f.name] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "PipelineConfig":
        groups = {"proposal": {}, "dom": {}, "loss": {}, "fit": {}}
        top = {}
        for key, value in flat.items():
            if "." in key:
                group, sub = key.split(".", 1)
                if group not in groups:
                    raise ConfigError(f"unknown configuration group {group!r}")
                groups[group][sub] = value
            else:
                top[key] = value
        try:
            return cls(
                proposal=ProposalConfig(**groups["proposal"]),
                dom=DomConfig(**groups["dom"]),
                loss=LossConfig(**groups["loss"]),
                fit=FitConfig(**groups["fit"]),
                **top,
            )
        except (TypeError, InvalidInputError) as e:
            raise ConfigError(f"bad configuration: {e}") from None

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        defaults = cls().flatten()
        flat = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in defaults:
                raise ConfigError(f"config line {line_no}: unknown key {key!r}")
            template = defaults[key]
            try:
                if isinstance(template, bool):
                    if value.lower() not in ("true", "false"):
                        raise ValueError(f"expected true/false, got {value!r}")
                    flat[key] = value.lower() == "true"
                elif isinstance(template, int):
                    flat[key] = int(value)
                elif isinstance(template, float):
                    flat[key] = float(value)
                else:
                    flat[key] = value
            except ValueError as e:
                raise ConfigError(f"config line {line_no}: {e}") from None
        return cls.from_flat(flat)

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(
            alpha=self.loss.alpha,
            beta=self.loss.beta,
            gamma=self.loss.gamma,
            eps_epochs=self.fit.epochs,
        )


def worker_count() -> int:
    """Parallelism cap: BPDO_THREADS if set, else min(cpu, 4)."""
    env = os.environ.get("BPDO_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"BPDO_THREADS must be an integer, got {env!r}") from None
        return max(n, 1)
    return max(min(os.cpu_count() or 1, 4), 1)


def _parallel_map(fn, items):
    n = worker_count()
    items = list(items)
    if n <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# -- parameters as graph leaves ----------------------------------------------


def init_params(config: PipelineConfig, rng=None):
    """Fresh TAM and refinement parameters seeded from the fit seed."""
    if rng is None:
        rng = np.random.default_rng(config.fit.seed)
    tam_params = tam_mod.init_tam_params(config.c_channels, rng=rng)
    n_bundles = 1 if config.dom.share_iteration_params else config.dom.t_iters
    dom_params = [
        dom_mod.init_dom_params(
            config.c_channels,
            m_heads=config.dom.m_heads,
            n_samples=config.dom.n_samples,
            r_max=config.dom.r_max,
            t_iters=config.dom.t_iters,
            hidden=config.dom.hidden,
            rng=rng,
        )
        for _ in range(n_bundles)
    ]
    return tam_params, dom_params


def _map_params(params, convert):
    """Rebuild a params dataclass with every array/tensor field converted."""
    if isinstance(params, LinearParams):
        return LinearParams(convert(params.weight), convert(params.bias))
    if isinstance(params, tam_mod.Conv2dParams):
        return tam_mod.Conv2dParams(convert(params.kernel), convert(params.bias))
    if isinstance(params, tam_mod.TamParams):
        kw = {
            f.name: _map_params(getattr(params, f.name), convert)
            for f in dataclasses.fields(params)
        }
        return tam_mod.TamParams(**kw)
    if isinstance(params, dom_mod.DomParams):
        return dom_mod.DomParams(
            m_heads=params.m_heads,
            n_samples=params.n_samples,
            value_proj=[_map_params(p, convert) for p in params.value_proj],
            qk_weight=[[_map_params(p, convert) for p in row] for row in params.qk_weight],
            head_out=_map_params(params.head_out, convert),
            offset_head=[_map_params(p, convert) for p in params.offset_head],
            update_hidden=_map_params(params.update_hidden, convert),
            update_out=_map_params(params.update_out, convert),
            r_max=params.r_max,
            t_iters=params.t_iters,
        )
    raise InvalidInputError(f"cannot map parameters of type {type(params)!r}")


def lift_params(params, dtype=None, requires_grad=True):
    """Wrap every parameter array in a leaf Tensor (optionally re-typed)."""

    def convert(arr):
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        if dtype is not None:
            data = data.astype(dtype)
        return Tensor(np.ascontiguousarray(data), requires_grad=requires_grad)

    return _map_params(params, convert)


def freeze_params(params, dtype=np.float32):
    """Extract plain ndarrays (for storage) from a possibly lifted bundle."""

    def convert(arr):
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        return np.ascontiguousarray(data.astype(dtype))

    return _map_params(params, convert)


def param_leaves(tam_params, dom_params_list):
    """(name, tensor) pairs across the whole model, in checkpoint order."""
    leaves = list(tam_mod.tam_leaves(tam_params))
    for i, dp in enumerate(dom_params_list):
        prefix = f"iter{i}." if len(dom_params_list) > 1 else ""
        for name, t in dom_mod.dom_leaves(dp):
            leaves.append((name.replace("dom.", f"dom.{prefix}", 1), t))
    return leaves


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    version: str
    config: PipelineConfig
    tam_params: tam_mod.TamParams
    dom_params: list
    fit_epochs: int = 0
    final_loss: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        leaves = param_leaves(self.tam_params, self.dom_params)
        flat_cfg = {}
        for k, v in self.config.flatten().items():
            flat_cfg[k] = v
        header = json.dumps(
            {
                "version": self.version,
                "config": flat_cfg,
                "fit": {"epochs": self.fit_epochs, "final_loss": self.final_loss},
                "tensors": [name for name, _ in leaves],
            },
            separators=(",", ":"),
            sort_keys=True,
        ).encode("utf-8")
        blob = bytearray(CKPT_MAGIC)
        blob += struct.pack("<I", len(header))
        blob += header
        for name, t in leaves:
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            arr = np.ascontiguousarray(data.astype(np.float32))
            if arr.ndim == 0:
                arr3 = arr.reshape(1, 1, 1)
            elif arr.ndim == 1:
                arr3 = arr.reshape(1, 1, -1)
            else:
                arr3 = arr.reshape(1, *arr.shape)
            blob += data_io.container_bytes(arr3, name)
        return bytes(blob)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 8 or blob[:4] != CKPT_MAGIC:
            raise ConfigError("not a checkpoint: bad magic")
        (hlen,) = struct.unpack("<I", blob[4:8])
        if len(blob) < 8 + hlen:
            raise ConfigError("truncated checkpoint header")
        try:
            header = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"unreadable checkpoint header: {e}") from None
        version = header.get("version")
        if version != CKPT_VERSION:
            raise ConfigError(
                f"checkpoint version {version!r} does not match {CKPT_VERSION!r}"
            )
        config = PipelineConfig.from_flat(header["config"])
        tensors = {}
        offset = 8 + hlen
        for name in header["tensors"]:
            if offset >= len(blob):
                raise ConfigError("checkpoint is missing tensor payloads")
            if blob[offset : offset + 4] != data_io.MAGIC:
                raise ConfigError("corrupt tensor stream in checkpoint")
            (tlen,) = struct.unpack("<I", blob[offset + 4 : offset + 8])
            head = json.loads(blob[offset + 8 : offset + 8 + tlen].decode("utf-8"))
            payload = 4 * int(np.prod(head["shape"]))
            end = offset + 8 + tlen + payload
            arr, got_name = data_io.parse_container(blob[offset:end])
            if got_name != name:
                raise ConfigError(f"tensor order mismatch: {got_name!r} != {name!r}")
            tensors[name] = arr
            offset = end
        ckpt = cls._rebuild(config, tensors)
        ckpt.fit_epochs = int(header.get("fit", {}).get("epochs", 0))
        ckpt.final_loss = header.get("fit", {}).get("final_loss", {})
        return ckpt

    @classmethod
    def _rebuild(cls, config: PipelineConfig, tensors: dict) -> "Checkpoint":
        template_tam, template_dom = init_params(config)

        def take(name, template_arr):
            if name not in tensors:
                raise ConfigError(f"checkpoint is missing tensor {name!r}")
            arr = tensors[name]
            want = np.asarray(template_arr)
            if arr.size != want.size:
                raise ConfigError(
                    f"tensor {name!r} has {arr.size} values, expected {want.size}"
                )
            return np.ascontiguousarray(arr.reshape(want.shape).astype(np.float32))

        replacement = {
            name: take(name, arr)
            for name, arr in param_leaves(template_tam, template_dom)
        }
        tam_names = [n for n, _ in tam_mod.tam_leaves(template_tam)]
        new_tam = _map_params(template_tam, _OrderedReplacer(tam_names, replacement))
        new_dom = []
        for i, dp in enumerate(template_dom):
            prefix = f"iter{i}." if len(template_dom) > 1 else ""
            names = [
                n.replace("dom.", f"dom.{prefix}", 1) for n, _ in dom_mod.dom_leaves(dp)
            ]
            new_dom.append(_map_params(dp, _OrderedReplacer(names, replacement)))
        return cls(
            version=CKPT_VERSION,
            config=config,
            tam_params=new_tam,
            dom_params=new_dom,
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


class _OrderedReplacer:
    """Field-order-aligned array substitution for _map_params walks."""

    def __init__(self, names, replacement):
        self._names = iter(names)
        self._replacement = replacement

    def __call__(self, _arr):
        return self._replacement[next(self._names)]


# -- corpus loading and training ----------------------------------------------


@dataclass
class PreparedScene:
    """Per-scene constants the fit loop reuses every epoch."""

    id: str
    features: np.ndarray  # (C, H, W) float32
    gt_maps: np.ndarray  # (4, H, W) float32: cls, dist, dir_x, dir_y
    ring_pairs: list  # list of (start_ring (K,2) f32, gt_ring (K,2) f32)
    pm_banks: np.ndarray | None = None  # (n, 2k, k, 2) alignment targets


def load_corpus(corpus_dir):
    """Read scenes.json plus one feature container per scene."""
    gt_path = os.path.join(corpus_dir, "scenes.json")
    if not os.path.exists(gt_path):
        raise ConfigError(f"corpus {corpus_dir!r} has no scenes.json")
    with open(gt_path, "r", encoding="utf-8") as fh:
        scenes = data_io.scenes_from_json(fh.read())
    for rec in scenes:
        feat_path = os.path.join(corpus_dir, f"{rec.id}.bpdt")
        if not os.path.exists(feat_path):
            raise ConfigError(
                f"scene {rec.id!r} has no feature container {feat_path!r}; "
                "fit/detect need features for every scene"
            )
        arr, _name = data_io.read_container(feat_path)
        rec.features = TensorField(arr)
    return scenes


def prepare_scene(rec: data_io.SceneRecord, config: PipelineConfig) -> PreparedScene:
    """Precompute supervision targets and training-time starting rings."""
    maps = priors.make_prior_maps(rec.polygons, rec.rows, rec.cols)
    gt_stack = maps.stacked().astype(np.float32)
    k = config.proposal.k_points
    props = proposal.extract_proposals(maps.dist, config.proposal)
    inst_masks = [
        geometry.rasterize(p, rec.rows, rec.cols).bits for p in rec.polygons
    ]
    pairs = []
    for prop in props:
        centroid = prop.points.mean(axis=0)
        cx = int(np.clip(np.rint(centroid[0]), 0, rec.cols - 1))
        cy = int(np.clip(np.rint(centroid[1]), 0, rec.rows - 1))
        owner = None
        for idx, bits in enumerate(inst_masks):
            if bits[cy, cx]:
                owner = idx
                break
        if owner is None:
            continue  # stray core; no stable supervision target
        gt_ring = geometry.resample_polygon(rec.polygons[owner], k).points
        pairs.append(
            (prop.points.astype(np.float32), gt_ring.astype(np.float32))
        )
    banks = (
        np.stack([losses._alignment_bank(np.asarray(p[1], dtype=np.float64)) for p in pairs])
        if pairs
        else None
    )
    return PreparedScene(
        id=rec.id,
        features=np.asarray(rec.features.data, dtype=np.float32),
        gt_maps=gt_stack,
        ring_pairs=pairs,
        pm_banks=banks,
    )


def _scene_losses(prepared: PreparedScene, tam_t, dom_t, config, weights, epoch):
    """Build the differentiable loss graph for one scene.

    Returns (total tensor, component floats dict).
    """
    rv = Tensor(prepared.features)
    f_tam, pred = tam_mod.tam_forward(rv, tam_t)
    gt = prepared.gt_maps
    l_cls = losses.cls_loss(pred[0], gt[0])
    l_dis = losses.dis_loss(
        pred[1], gt[1], gt[0], include_background=config.loss.include_background
    )
    l_dir = losses.dir_loss(pred[2], pred[3], gt[2], gt[3], gt[0])

    if prepared.ring_pairs:
        starts = np.concatenate([p[0] for p in prepared.ring_pairs], axis=0)
        snaps = dom_mod.refine_rings(
            f_tam,
            Tensor(starts.astype(np.float32)),
            dom_t if len(dom_t) > 1 else dom_t[0],
        )
        gt_rings = np.stack([p[1] for p in prepared.ring_pairs])
        l_pm = losses.pm_loss_stacked(snaps, gt_rings, banks=prepared.pm_banks)
    else:
        l_pm = as_tensor(np.zeros((), dtype=np.float32))

    sf = losses.schedule_factor(weights, epoch)
    total = l_cls + weights.alpha * l_dis + weights.beta * l_dir + sf * l_pm
    parts = {
        "l_cls": float(l_cls.data),
        "l_dis": float(l_dis.data),
        "l_dir": float(l_dir.data),
        "l_pm": float(l_pm.data),
    }
    return total, parts


@dataclass
class FitResult:
    checkpoint: Checkpoint
    curve: list  # one LossReport per epoch


def fit(scenes, config: PipelineConfig, progress=None) -> FitResult:
    """Train on prepared scenes; deterministic given config.fit.seed."""
    rng = np.random.default_rng(config.fit.seed)
    tam_params, dom_params = init_params(config, rng)
    tam_t = lift_params(tam_params, dtype=np.float32, requires_grad=True)
    dom_t = [lift_params(dp, dtype=np.float32, requires_grad=True) for dp in dom_params]
    leaves = [t for _name, t in param_leaves(tam_t, dom_t)]
    velocity = [np.zeros_like(t.data) for t in leaves]

    prepared = [
        p if isinstance(p, PreparedScene) else prepare_scene(p, config) for p in scenes
    ]
    if not prepared:
        raise InvalidInputError("fit needs at least one scene")
    weights = config.loss_weights()
    lr = config.fit.learning_rate
    mu = config.fit.momentum
    curve = []
    for epoch in range(config.fit.epochs):
        order = rng.permutation(len(prepared))
        sums = {"l_cls": 0.0, "l_dis": 0.0, "l_dir": 0.0, "l_pm": 0.0}
        for start in range(0, len(order), config.fit.batch_size):
            batch = order[start : start + config.fit.batch_size]
            for leaf in leaves:
                leaf.zero_grad()
            inv = 1.0 / len(batch)
            for si in batch:
                total, parts = _scene_losses(
                    prepared[si], tam_t, dom_t, config, weights, epoch
                )
                for key, val in parts.items():
                    sums[key] += val
                    if not np.isfinite(val):
                        raise FitAbortError(
                            f"loss component {key} became non-finite "
                            f"(epoch {epoch}, scene {prepared[si].id})"
                        )
                (total * inv).backward()
            for leaf, vel in zip(leaves, velocity):
                g = leaf.grad if leaf.grad is not None else 0.0
                vel *= mu
                vel += g
                leaf.data -= (lr * vel).astype(leaf.data.dtype)
        n = float(len(prepared))
        report = losses.total_loss(
            (sums["l_cls"] / n, sums["l_dis"] / n, sums["l_dir"] / n, sums["l_pm"] / n),
            weights,
            epoch,
        )
        curve.append(report)
        if progress is not None:
            progress(epoch, report)

    ckpt = Checkpoint(
        version=CKPT_VERSION,
        config=config,
        tam_params=freeze_params(tam_t),
        dom_params=[freeze_params(dp) for dp in dom_t],
        fit_epochs=config.fit.epochs,
        final_loss=curve[-1].as_dict() if curve else {},
    )
    return FitResult(checkpoint=ckpt, curve=curve)


# -- detection ------------------------------------------------------------------


@dataclass
class Detection:
    scene_id: str
    polygons: list  # final rings as (K, 2) float lists
    iterations: list  # t_iters + 1 states, each a list of rings
    pred_maps: np.ndarray  # (4, H, W) float32


def detect_scene(rec: data_io.SceneRecord, ckpt: Checkpoint) -> Detection:
    """Run the two-stage pipeline on one scene with frozen parameters."""
    config = ckpt.config
    if rec.features is None:
        raise ConfigError(f"scene {rec.id!r} carries no features")
    if rec.features.channels != config.c_channels:
        raise ConfigError(
            f"scene {rec.id!r} has {rec.features.channels} channels, "
            f"checkpoint expects {config.c_channels}"
        )
    rv = Tensor(np.asarray(rec.features.data, dtype=np.float32))
    f_tam, pred = tam_mod.tam_forward(rv, ckpt.tam_params)
    dist_plane = pred.data[1]
    if config.detect_gate_by_cls:
        dist_plane = dist_plane * (pred.data[0] > 0.5)
    dist = TensorField(dist_plane[None].astype(np.float64))
    props = proposal.extract_proposals(dist, config.proposal)
    params = ckpt.dom_params if len(ckpt.dom_params) > 1 else ckpt.dom_params[0]
    traces = dom_mod.dom_optimize(f_tam, props, params)

    t_states = config.dom.t_iters + 1
    iterations = []
    for t in range(t_states):
        iterations.append(
            [trace.snapshots[t].points.tolist() for trace in traces]
        )
    return Detection(
        scene_id=rec.id,
        polygons=[trace.final.points.tolist() for trace in traces],
        iterations=iterations,
        pred_maps=pred.data.astype(np.float32),
    )


def detect_corpus(scenes, ckpt: Checkpoint):
    return _parallel_map(lambda rec: detect_scene(rec, ckpt), scenes)


def detections_to_json(detections) -> str:
    payload = {
        "scenes": [
            {
                "scene_id": d.scene_id,
                "polygons": d.polygons,
                "iterations": d.iterations,
            }
            for d in detections
        ]
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def detections_from_json(text: str):
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad predictions JSON: {e}") from None
    if not isinstance(payload, dict) or "scenes" not in payload:
        raise ConfigError("predictions JSON must contain a 'scenes' list")
    return payload["scenes"]


def detection_polygons(detections_payload):
    """Predicted rings as Polygons keyed by scene id (degenerate allowed)."""
    out = {}
    for entry in detections_payload:
        polys = []
        for ring in entry["polygons"]:
            try:
                polys.append(geometry.Polygon(np.asarray(ring), allow_degenerate=True))
            except InvalidInputError:
                continue  # collapsed ring: nothing to score
        out[str(entry["scene_id"])] = polys
    return out
