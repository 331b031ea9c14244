"""Stacked hourglass network with multi-level attention fusion.

Each stack is an encoder-decoder with skip connections at every
resolution and emits a V-channel heatmap prediction at input resolution
(intermediate supervision). The per-stack intermediate representations
are concatenated into a multi-level representation and compressed by a
series of pointwise convolutions ending in a sigmoid to a single-channel
attention map, which recalibrates the final stack's prediction by
broadcast multiplication. Disabling the attention branch reproduces a
plain stacked hourglass.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ndat import read_ndat, write_ndat
from .targets import DEFAULT_NUM_DISCS


@dataclass
class ModelConfig:
    num_stacks: int = 2
    feature_channels: int = 64
    num_discs: int = DEFAULT_NUM_DISCS
    input_size: tuple[int, int] = (256, 256)
    hourglass_depth: int = 4
    with_attention: bool = True
    attention_hidden: int | None = None  # None: concat channels // 2

    def validate(self) -> None:
        if self.num_stacks < 1:
            raise ValueError(f"num_stacks must be >= 1, got {self.num_stacks}")
        if self.feature_channels < 2 or self.feature_channels % 2:
            raise ValueError(f"feature_channels must be even and >= 2, got {self.feature_channels}")
        h, w = self.input_size
        div = 1 << self.hourglass_depth
        if h % div or w % div:
            raise ValueError(
                f"input size {h}x{w} must be divisible by 2^hourglass_depth = {div}"
            )


@dataclass
class ForwardOutput:
    """Per-stack heatmaps, the attention gate, and the refined prediction.

    For a single (1,H,W) input the heatmaps have shape (V,H,W) and the
    attention map (1,H,W); for batched (N,1,H,W) input a leading batch
    axis is kept on every field. ``attention_map`` is None when the model
    was built without the attention branch.
    """

    intermediate_heatmaps: list[Tensor]
    attention_map: Tensor | None
    final_heatmap: Tensor


class Model:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- layer helpers ---------------------------------------------------

    def _conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        w = self.params[f"{name}.weight"]
        b = self.params[f"{name}.bias"]
        out = ad.conv2d(x, w, stride=stride, padding=padding)
        return ad.add(out, ad.reshape(b, (1, b.size, 1, 1)))

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return ad.instance_norm(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"])

    def _residual(self, name: str, x: Tensor) -> Tensor:
        # pre-activation bottleneck: norm-relu-1x1, norm-relu-3x3, norm-relu-1x1
        out = self._conv(f"{name}.conv1", ad.relu(self._norm(f"{name}.norm1", x)))
        out = self._conv(f"{name}.conv2", ad.relu(self._norm(f"{name}.norm2", out)), padding=1)
        out = self._conv(f"{name}.conv3", ad.relu(self._norm(f"{name}.norm3", out)))
        return ad.add(x, out)

    def _hourglass(self, name: str, depth: int, x: Tensor) -> Tensor:
        up1 = self._residual(f"{name}.d{depth}.up1", x)
        low, _ = ad.maxpool2(x)
        low = self._residual(f"{name}.d{depth}.low1", low)
        if depth > 1:
            low = self._hourglass(name, depth - 1, low)
        else:
            low = self._residual(f"{name}.d{depth}.low2", low)
        low = self._residual(f"{name}.d{depth}.low3", low)
        return ad.add(up1, ad.upsample_nearest2(low))

    # -- forward ---------------------------------------------------------

    def forward(self, image) -> ForwardOutput:
        """Run the network on one image (1,H,W) or a batch (N,1,H,W)."""
        if isinstance(image, Tensor):
            data = image.data
        else:
            data = np.asarray(image, dtype=self.dtype)
        single = data.ndim == 3
        if single:
            data = data[None]
        if data.ndim != 4 or data.shape[1] != 1:
            raise ValueError(f"model input must be (1,H,W) or (N,1,H,W), got shape {data.shape}")
        if tuple(data.shape[2:]) != tuple(self.cfg.input_size):
            raise ValueError(
                f"input spatial size {data.shape[2:]} does not match configured {self.cfg.input_size}"
            )
        x = Tensor(data.astype(self.dtype, copy=False))

        x = ad.relu(self._norm("stem.norm", self._conv("stem.conv", x, padding=1)))
        x = self._residual("stem.res", x)

        inter_feats: list[Tensor] = []
        heatmaps: list[Tensor] = []
        for i in range(self.cfg.num_stacks):
            hg = self._hourglass(f"stack{i}.hg", self.cfg.hourglass_depth, x)
            p = self._residual(f"stack{i}.feat", hg)
            p = ad.relu(self._norm(f"stack{i}.feat_norm", self._conv(f"stack{i}.feat_conv", p)))
            hm = self._conv(f"stack{i}.head", p)
            inter_feats.append(p)
            heatmaps.append(hm)
            if i < self.cfg.num_stacks - 1:
                x = ad.add(ad.add(x, self._conv(f"stack{i}.merge_feat", p)), self._conv(f"stack{i}.merge_pred", hm))

        if self.cfg.with_attention:
            attention, final = self.attention_fuse(inter_feats, heatmaps[-1])
        else:
            attention, final = None, heatmaps[-1]

        if single:
            heatmaps = [ad.reshape(h, h.shape[1:]) for h in heatmaps]
            final = ad.reshape(final, final.shape[1:])
            if attention is not None:
                attention = ad.reshape(attention, attention.shape[1:])
        return ForwardOutput(intermediate_heatmaps=heatmaps, attention_map=attention, final_heatmap=final)

    def attention_fuse(self, intermediates: list[Tensor], final_pred: Tensor) -> tuple[Tensor, Tensor]:
        """Compress stacked intermediate representations into a single-channel
        sigmoid gate and multiply it into the final per-disc prediction."""
        spatial = intermediates[0].shape[2:]
        for t in intermediates[1:]:
            if t.shape[2:] != spatial:
                raise ValueError(f"intermediate spatial dims differ: {t.shape[2:]} vs {spatial}")
        if final_pred.shape[2:] != spatial:
            raise ValueError(
                f"final prediction spatial dims {final_pred.shape[2:]} do not match intermediates {spatial}"
            )
        stacked = ad.concat(intermediates, axis=1) if len(intermediates) > 1 else intermediates[0]
        a = ad.relu(self._conv("attn.conv1", stacked))
        a = ad.sigmoid(self._conv("attn.conv2", a))
        return a, ad.mul(a, final_pred)


def _init_params(cfg: ModelConfig, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}

    def conv(name: str, c_in: int, c_out: int, k: int):
        # He-uniform, zero bias
        limit = np.sqrt(6.0 / (c_in * k * k))
        w = rng.uniform(-limit, limit, size=(c_out, c_in, k, k)).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def norm(name: str, c: int):
        params[f"{name}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)

    def residual(name: str, c: int):
        half = c // 2
        norm(f"{name}.norm1", c)
        conv(f"{name}.conv1", c, half, 1)
        norm(f"{name}.norm2", half)
        conv(f"{name}.conv2", half, half, 3)
        norm(f"{name}.norm3", half)
        conv(f"{name}.conv3", half, c, 1)

    f = cfg.feature_channels
    v = cfg.num_discs
    conv("stem.conv", 1, f, 3)
    norm("stem.norm", f)
    residual("stem.res", f)
    for i in range(cfg.num_stacks):
        for d in range(cfg.hourglass_depth, 0, -1):
            residual(f"stack{i}.hg.d{d}.up1", f)
            residual(f"stack{i}.hg.d{d}.low1", f)
            if d == 1:
                residual(f"stack{i}.hg.d{d}.low2", f)
            residual(f"stack{i}.hg.d{d}.low3", f)
        residual(f"stack{i}.feat", f)
        conv(f"stack{i}.feat_conv", f, f, 1)
        norm(f"stack{i}.feat_norm", f)
        conv(f"stack{i}.head", f, v, 1)
        if i < cfg.num_stacks - 1:
            conv(f"stack{i}.merge_feat", f, f, 1)
            conv(f"stack{i}.merge_pred", v, f, 1)
    if cfg.with_attention:
        concat_c = cfg.num_stacks * f
        hidden = cfg.attention_hidden if cfg.attention_hidden is not None else max(1, concat_c // 2)
        conv("attn.conv1", concat_c, hidden, 1)
        conv("attn.conv2", hidden, 1, 1)
    return params


def build_model(cfg: ModelConfig, rng_seed: int, dtype=np.float32) -> Model:
    """Construct a model with deterministic seeded initialization."""
    cfg.validate()
    rng = np.random.default_rng(rng_seed)
    return Model(cfg, _init_params(cfg, rng, dtype))


# ---------------------------------------------------------------------------
# checkpoints: a directory of NDAT files plus a JSON manifest
# ---------------------------------------------------------------------------


def save_checkpoint(
    model: Model,
    directory: str | os.PathLike,
    extra_arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    directory = os.fspath(directory)
    os.makedirs(directory, exist_ok=True)
    entries: dict[str, dict] = {}
    arrays: dict[str, np.ndarray] = {name: p.data for name, p in model.params.items()}
    for name, arr in arrays.items():
        fname = name.replace("/", "_") + ".ndat"
        write_ndat(os.path.join(directory, fname), arr)
        entries[name] = {"file": fname, "shape": list(arr.shape)}
    extra_entries: dict[str, dict] = {}
    for name, arr in (extra_arrays or {}).items():
        fname = "extra__" + name.replace("/", "_").replace(".", "_") + ".ndat"
        write_ndat(os.path.join(directory, fname), np.asarray(arr, dtype=np.float32))
        extra_entries[name] = {"file": fname, "shape": list(np.asarray(arr).shape)}
    manifest = {
        "config": asdict(model.cfg),
        "params": entries,
        "extra": extra_entries,
        "meta": meta or {},
    }
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".json.tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(directory, "manifest.json"))


def load_checkpoint(directory: str | os.PathLike, dtype=np.float32):
    """Load a checkpoint directory; returns (model, extra_arrays, meta)."""
    directory = os.fspath(directory)
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg_dict = dict(manifest["config"])
    cfg_dict["input_size"] = tuple(cfg_dict["input_size"])
    cfg = ModelConfig(**cfg_dict)
    params: dict[str, Tensor] = {}
    for name, entry in manifest["params"].items():
        arr = read_ndat(os.path.join(directory, entry["file"])).astype(dtype)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"checkpoint param {name}: shape {arr.shape} != manifest {entry['shape']}")
        params[name] = Tensor(arr, requires_grad=True)
    extra = {
        name: read_ndat(os.path.join(directory, entry["file"]))
        for name, entry in manifest.get("extra", {}).items()
    }
    model = Model(cfg, params)
    return model, extra, manifest.get("meta", {})
