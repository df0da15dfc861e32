"""A small 2-D U-Net whose residual blocks can be wrapped with Hyper-Connections.

Layout for ``depth`` levels with widths ``c_l = base * 2**l``::

    stem conv 4 -> c_0
    encoder level l:  stage(c_l) -> avg-pool -> conv c_l -> c_{l+1}
    bottleneck:       stage(c_depth)
    decoder level l:  upsample -> concat skip -> conv (c_{l+1} + c_l) -> c_l -> stage(c_l)
    head              1x1 conv c_0 -> n_classes

A stage is ``blocks_per_stage`` width-preserving residual blocks
``F(x) = conv(relu(conv(x)))``. In baseline mode each block computes
``x + F(x)``; in HC modes the stage expands its input into ``n`` streams,
applies one hyper-connection update per block and averages the streams at
the stage end. Every block is one wrapped site with its own HCParams.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import hyperconnections as hc
from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class ModelConfig:
    depth: int = 3
    base_channels: int = 8
    n_streams: int = 1
    mode: str = "baseline"
    in_modalities: int = 4
    n_classes: int = 4
    seed: int = 0
    blocks_per_stage: int = 2
    dtype: str = "f32"

    def validate(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.mode not in hc.MODES:
            raise ValueError(f"mode must be one of {hc.MODES}, got {self.mode!r}")
        if self.n_streams < 1:
            raise ValueError("n_streams must be >= 1")
        if self.mode == "baseline" and self.n_streams != 1:
            raise ValueError("baseline mode requires n_streams == 1")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be f32 or f64")
        return self

    def to_dict(self):
        return asdict(self)

    def widths(self):
        return [self.base_channels * 2 ** l for l in range(self.depth + 1)]

    def stage_widths(self):
        """Channel width of every stage in forward order."""
        w = self.widths()
        return w[:self.depth] + [w[self.depth]] + w[:self.depth][::-1]


class Model:
    """Parameters of a segmentation network plus its configuration.

    ``conv`` maps names to weight/bias tensors; ``sites`` holds one HCParams
    per wrapped block (empty in baseline mode).
    """

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.conv: dict[str, Tensor] = {}
        self.sites: list[hc.HCParams] = []
        self.site_channels: list[int] = []

    def parameters(self):
        """All learnable tensors by name, conv first then HC."""
        out = dict(self.conv)
        for i, p in enumerate(self.sites):
            for k, t in p.tensors().items():
                out[f"site{i}.{k}"] = t
        return out

    def copy_conv_weights_from(self, other: "Model"):
        """Share the convolution weights of ``other`` (same architecture)."""
        for k, t in other.conv.items():
            mine = self.conv[k]
            if mine.shape != t.shape:
                raise ShapeError(f"{k}: {mine.shape} vs {t.shape}")
            mine.data = t.data.astype(mine.dtype, copy=True)


def _he(rng, shape, dtype, gain=1.0):
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), shape), dtype=dtype, requires_grad=True)


def _conv_param(m, rng, name, cin, cout, k, gain=1.0):
    dt = m.cfg.dtype
    m.conv[f"{name}.w"] = _he(rng, (cout, cin, k, k), dt, gain)
    m.conv[f"{name}.b"] = Tensor(np.zeros(cout), dtype=dt, requires_grad=True)


def build_model(cfg: ModelConfig) -> Model:
    cfg.validate()
    m = Model(cfg)
    ss = np.random.SeedSequence([int(cfg.seed), 0x4843])
    rng = np.random.Generator(np.random.PCG64(ss))
    widths = cfg.widths()
    bps = cfg.blocks_per_stage

    _conv_param(m, rng, "stem", cfg.in_modalities, widths[0], 3)
    for s, c in enumerate(cfg.stage_widths()):
        for j in range(bps):
            _conv_param(m, rng, f"stage{s}.block{j}.conv1", c, c, 3)
            _conv_param(m, rng, f"stage{s}.block{j}.conv2", c, c, 3, gain=0.5)
    for l in range(cfg.depth):
        _conv_param(m, rng, f"down{l}", widths[l], widths[l + 1], 3)
        _conv_param(m, rng, f"up{l}", widths[l + 1] + widths[l], widths[l], 3)
    _conv_param(m, rng, "head", widths[0], cfg.n_classes, 1)

    if cfg.mode != "baseline":
        hc_seq = np.random.SeedSequence([int(cfg.seed), 0x4843, 1])
        children = hc_seq.spawn(len(cfg.stage_widths()) * bps)
        idx = 0
        for c in cfg.stage_widths():
            for _ in range(bps):
                m.sites.append(hc.init_params(cfg.mode, cfg.n_streams, c, layer_index=idx,
                                              seed=children[idx], dtype=cfg.dtype))
                m.site_channels.append(c)
                idx += 1
    return m


def _conv(m, name, x, pad=1):
    return T.conv2d(x, m.conv[f"{name}.w"], m.conv[f"{name}.b"], stride=1, pad=pad)


def _block(m, stage, j):
    def f(x):
        return _conv(m, f"stage{stage}.block{j}.conv2", T.relu(_conv(m, f"stage{stage}.block{j}.conv1", x)))
    return f


def _to_tokens(x):
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def _from_tokens(t, h, w):
    b, _, c = t.shape
    return T.transpose(T.reshape(t, (b, h, w, c)), (0, 3, 1, 2))


def _stage(m, x, stage, trace):
    cfg = m.cfg
    bps = cfg.blocks_per_stage
    if cfg.mode == "baseline":
        for j in range(bps):
            x = x + _block(m, stage, j)(x)
        return x
    _, _, h, w = x.shape
    state = hc.expand(_to_tokens(x), cfg.n_streams)
    for j in range(bps):
        f = _block(m, stage, j)

        def layer(tok, f=f):
            return _to_tokens(f(_from_tokens(tok, h, w)))

        site = stage * bps + j
        if trace is not None:
            trace[site] = state
        state = hc.hc_update(state, m.sites[site], layer)
    return _from_tokens(hc.collapse(state), h, w)


def forward(m: Model, x, trace: dict | None = None) -> Tensor:
    """Per-pixel class logits (B, n_classes, H, W).

    If ``trace`` is a dict it receives the hyper state entering every site.
    """
    cfg = m.cfg
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=cfg.dtype)
    if x.ndim != 4 or x.shape[1] != cfg.in_modalities:
        raise ShapeError(f"expected (B, {cfg.in_modalities}, H, W) input, got {x.shape}")
    f = 2 ** cfg.depth
    if x.shape[2] % f or x.shape[3] % f:
        raise ShapeError(f"spatial size {x.shape[2:]} not divisible by {f}")
    if x.dtype != np.dtype(T._DTYPES[cfg.dtype]):
        x = x.astype(cfg.dtype)

    h = T.relu(_conv(m, "stem", x))
    skips = []
    stage = 0
    for l in range(cfg.depth):
        h = _stage(m, h, stage, trace)
        stage += 1
        skips.append(h)
        h = T.relu(_conv(m, f"down{l}", T.avg_pool2d(h, 2)))
    h = _stage(m, h, stage, trace)
    stage += 1
    for l in reversed(range(cfg.depth)):
        h = T.concat([T.upsample2d(h, 2), skips[l]], axis=1)
        h = T.relu(_conv(m, f"up{l}", h))
        h = _stage(m, h, stage, trace)
        stage += 1
    return _conv(m, "head", h, pad=0)


def predict(m: Model, x, batch_size: int = 16) -> np.ndarray:
    """Argmax label maps (B, H, W) without recording a graph."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x)
    out = []
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(forward(m, x[i:i + batch_size]).data.argmax(axis=1).astype(np.uint8))
    if not out:
        return np.zeros((0,) + x.shape[2:], np.uint8)
    return np.concatenate(out)


def param_count(m: Model):
    """``(total, hc)`` learnable scalar counts by enumeration."""
    total = sum(t.size for t in m.parameters().values())
    hc_total = sum(t.size for p in m.sites for t in p.tensors().values())
    return total, hc_total


def conv_param_formula(cfg: ModelConfig) -> int:
    """Closed-form count of the convolutional (baseline) parameters."""
    w = cfg.widths()
    conv = lambda cin, cout, k: cout * cin * k * k + cout  # noqa: E731
    total = conv(cfg.in_modalities, w[0], 3) + conv(w[0], cfg.n_classes, 1)
    total += sum(2 * cfg.blocks_per_stage * conv(c, c, 3) for c in cfg.stage_widths())
    for l in range(cfg.depth):
        total += conv(w[l], w[l + 1], 3) + conv(w[l + 1] + w[l], w[l], 3)
    return total


def hc_param_formula(cfg: ModelConfig) -> int:
    """Closed-form HC parameter count summed over wrapped sites."""
    if cfg.mode == "baseline":
        return 0
    return sum(cfg.blocks_per_stage * hc.hc_param_formula(cfg.mode, cfg.n_streams, c)
               for c in cfg.stage_widths())


def n_sites(cfg: ModelConfig) -> int:
    return 0 if cfg.mode == "baseline" else cfg.blocks_per_stage * (2 * cfg.depth + 1)


def delta_rate(hc_params: int, baseline_total) -> float:
    """Relative parameter increase in percent."""
    return 100.0 * hc_params / baseline_total
