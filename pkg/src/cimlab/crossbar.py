"""Memristive crossbar mapping and analog matrix-vector simulation.

A weight matrix is stored as ``M = W.T`` (rows = inputs, columns = outputs)
split into tiles. Each signed weight is a differential pair ``G+ - G-``:
the positive part is programmed on ``G+``, the negative part on ``G-``, and
the unused device of the pair sits at ``g_off``. Magnitudes are normalized
per layer by ``max|W|`` and quantized to ``levels`` uniform states between
``g_off`` and ``g_on``; the scale is re-applied digitally after the column
sum.

Physical cells are addressed as ``(tile, row, col)`` where ``col = 2*j`` is
the ``G+`` device of logical column ``j`` and ``col = 2*j + 1`` its ``G-``
device. Programs are treated as immutable: every perturbation returns a
new program.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .nn import WEIGHT_LAYERS, BatchNorm, Conv2d, Dense, ForwardContext, Model, Sign, sign

STUCK_ON, STUCK_OFF, DRIFT = 0, 1, 2
KIND_NAMES = {STUCK_ON: "stuck_on", STUCK_OFF: "stuck_off", DRIFT: "drift"}
KIND_CODES = {v: k for k, v in KIND_NAMES.items()}
MODES = ("adc", "binarized")


class MappingError(ValueError):
    pass


class MissingReferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class CrossbarConfig:
    tile_rows: int = 128
    tile_cols: int = 128
    g_on: float = 100.0
    g_off: float = 10.0
    levels: int = 16
    adc_bits: Optional[int] = 8
    mode: str = "adc"
    variation_sigma: float = 0.0
    read_noise_sigma: float = 0.0

    def __post_init__(self):
        if not self.g_on > self.g_off > 0:
            raise ValueError("need g_on > g_off > 0")
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ValueError("tile dimensions must be >= 1")
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.adc_bits is not None and self.adc_bits < 1:
            raise ValueError("adc_bits must be >= 1 (or None for ideal sensing)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.variation_sigma < 0 or self.read_noise_sigma < 0:
            raise ValueError("sigmas must be >= 0")

    @property
    def g_range(self) -> float:
        return self.g_on - self.g_off


@dataclass
class Tile:
    layer: int
    row0: int
    col0: int
    g_plus: np.ndarray
    g_minus: np.ndarray
    stuck_plus: np.ndarray
    stuck_minus: np.ndarray
    adc_range: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    polarity: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.g_plus.shape

    def copy(self) -> "Tile":
        return replace(self, g_plus=self.g_plus.copy(), g_minus=self.g_minus.copy(),
                       stuck_plus=self.stuck_plus.copy(), stuck_minus=self.stuck_minus.copy())


@dataclass
class LayerMap:
    layer: int
    kind: str
    scale: float
    in_dim: int
    out_dim: int
    tile_ids: List[int]
    # index of the Sign layer folded into binarized sensing, if any
    absorb_until: Optional[int] = None


@dataclass
class CrossbarProgram:
    tiles: List[Tile]
    layers: Dict[int, LayerMap]
    config: CrossbarConfig

    def with_tiles(self, tiles: List[Tile]) -> "CrossbarProgram":
        return CrossbarProgram(tiles, self.layers, self.config)

    def with_config(self, **changes) -> "CrossbarProgram":
        return CrossbarProgram(self.tiles, self.layers, replace(self.config, **changes))

    def copy(self) -> "CrossbarProgram":
        return self.with_tiles([t.copy() for t in self.tiles])

    @property
    def n_cells(self) -> int:
        return sum(2 * t.g_plus.size for t in self.tiles)

    def conductances(self) -> np.ndarray:
        return np.concatenate([np.concatenate([t.g_plus.ravel(), t.g_minus.ravel()]) for t in self.tiles])

    def read_back(self, layer: Optional[int] = None) -> np.ndarray:
        """Effective weight matrix (in_dim, out_dim) of a mapped layer."""
        layer = min(self.layers) if layer is None else layer
        lm = self.layers[layer]
        out = np.zeros((lm.in_dim, lm.out_dim))
        for tid in lm.tile_ids:
            t = self.tiles[tid]
            r, c = t.shape
            out[t.row0:t.row0 + r, t.col0:t.col0 + c] = (t.g_plus - t.g_minus) / self.config.g_range * lm.scale
        return out


def map_matrix(w: np.ndarray, cfg: CrossbarConfig, w_max: Optional[float] = None
               ) -> Tuple[np.ndarray, np.ndarray, float]:
    """Quantize a signed matrix onto a differential conductance pair.

    Returns ``(g_plus, g_minus, scale)``; ``scale`` defaults to ``max|w|``.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise MappingError("weights must be finite")
    peak = float(np.abs(w).max()) if w.size else 0.0
    scale = peak if w_max is None else float(w_max)
    if scale <= 0:
        scale = 1.0
    if peak > scale * (1 + 1e-12):
        raise MappingError(f"weight magnitude {peak:.6g} exceeds representable scale {scale:.6g}; "
                           "normalize the layer first")
    q = np.round(np.abs(w) / scale * (cfg.levels - 1)) / (cfg.levels - 1)
    g = cfg.g_off + q * cfg.g_range
    g_plus = np.where(w > 0, g, cfg.g_off)
    g_minus = np.where(w < 0, g, cfg.g_off)
    return g_plus, g_minus, scale


def read_back_matrix(g_plus: np.ndarray, g_minus: np.ndarray, cfg: CrossbarConfig, scale: float) -> np.ndarray:
    return (g_plus - g_minus) / cfg.g_range * scale


def _absorb_target(model: Model, i: int) -> Optional[int]:
    layers = model.layers
    j = i + 1
    if j < len(layers) and type(layers[j]) is BatchNorm:
        j += 1
    if j < len(layers) and isinstance(layers[j], Sign):
        return j
    return None


def map_weights(model: Model, cfg: CrossbarConfig, calib_inputs: Optional[np.ndarray] = None,
                seed: int = 0) -> CrossbarProgram:
    """Program every dense/conv layer of ``model`` onto crossbar tiles.

    When ``cfg.adc_bits`` is set, per-column ADC ranges are calibrated as the
    max |current| over ``calib_inputs`` (256 standard-normal inputs when not
    given) on the fault-free, noise-free program.
    """
    tiles: List[Tile] = []
    layers: Dict[int, LayerMap] = {}
    for i, layer in enumerate(model.layers):
        if not isinstance(layer, WEIGHT_LAYERS):
            continue
        W = np.asarray(layer.effective_weight(), dtype=np.float64)
        M = W.reshape(W.shape[0], -1).T
        g_plus, g_minus, scale = map_matrix(M, cfg)
        ids = []
        for r0 in range(0, M.shape[0], cfg.tile_rows):
            for c0 in range(0, M.shape[1], cfg.tile_cols):
                gp = g_plus[r0:r0 + cfg.tile_rows, c0:c0 + cfg.tile_cols].copy()
                gm = g_minus[r0:r0 + cfg.tile_rows, c0:c0 + cfg.tile_cols].copy()
                ids.append(len(tiles))
                tiles.append(Tile(i, r0, c0, gp, gm, np.zeros(gp.shape, bool), np.zeros(gm.shape, bool)))
        layers[i] = LayerMap(i, "conv" if isinstance(layer, Conv2d) else "dense", scale,
                             M.shape[0], M.shape[1], ids, _absorb_target(model, i))
    prog = CrossbarProgram(tiles, layers, cfg)
    if cfg.adc_bits is not None:
        prog = calibrate_adc(model, prog, calib_inputs, seed)
    return prog


def calibrate_adc(model: Model, prog: CrossbarProgram, calib_inputs: Optional[np.ndarray] = None,
                  seed: int = 0) -> CrossbarProgram:
    if calib_inputs is None:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x414443]))
        calib_inputs = rng.standard_normal((256,) + model.input_shape)
    ideal = prog.with_config(adc_bits=None, mode="adc", read_noise_sigma=0.0)
    record: Dict[int, np.ndarray] = {}
    faulty_forward(model, ideal, calib_inputs, record=record)
    tiles = []
    for tid, t in enumerate(prog.tiles):
        rng_ = record.get(tid)
        tiles.append(replace(t, adc_range=np.zeros(t.shape[1]) if rng_ is None else rng_.copy()))
    return prog.with_tiles(tiles)


def adc_quantize(current: np.ndarray, full_scale: np.ndarray, bits: int) -> np.ndarray:
    """Signed uniform quantizer with 2**(bits-1) - 1 steps per polarity."""
    half = max(2 ** (bits - 1) - 1, 1)
    fs = np.asarray(full_scale, dtype=np.float64)
    step = np.where(fs > 0, fs / half, 1.0)
    q = np.clip(np.round(current / step), -half, half) * step
    return np.where(fs > 0, q, 0.0)


def analog_mvm(prog: CrossbarProgram, x: np.ndarray, layer: Optional[int] = None,
               rng: Optional[np.random.Generator] = None,
               record: Optional[Dict[int, np.ndarray]] = None,
               binarize: bool = False) -> np.ndarray:
    """Column currents of one mapped layer for a batch of input rows.

    Returns values in weight units (scale re-applied, no bias). With
    ``binarize`` (BinarizedPartialSum sensing) each tile column yields
    ``polarity * sign(I - theta)`` in current space and the returned value
    is the digital sum of those +/-1 partial results.
    """
    cfg = prog.config
    layer = min(prog.layers) if layer is None else layer
    lm = prog.layers[layer]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.shape[1] != lm.in_dim:
        raise ValueError(f"layer {layer}: input length {x.shape[1]} does not match {lm.in_dim} crossbar rows")
    y = np.zeros((x.shape[0], lm.out_dim))
    to_weight = lm.scale / cfg.g_range
    for tid in lm.tile_ids:
        t = prog.tiles[tid]
        r, c = t.shape
        current = x[:, t.row0:t.row0 + r] @ (t.g_plus - t.g_minus)
        if rng is not None and cfg.read_noise_sigma > 0:
            current = current * (1.0 + cfg.read_noise_sigma * rng.standard_normal(current.shape))
        if record is not None:
            peak = np.abs(current).max(axis=0)
            record[tid] = np.maximum(record[tid], peak) if tid in record else peak
        if binarize:
            if t.theta is None:
                raise MissingReferenceError(f"tile {tid} has no sensing reference; run generate_reference first")
            pol = t.polarity if t.polarity is not None else 1.0
            y[:, t.col0:t.col0 + c] += sign(pol * (current - t.theta))
            continue
        if cfg.adc_bits is not None:
            if t.adc_range is None:
                raise RuntimeError(f"tile {tid} has no ADC range; calibrate the program")
            current = adc_quantize(current, t.adc_range, cfg.adc_bits)
        y[:, t.col0:t.col0 + c] += current * to_weight
    return y


def faulty_forward(model: Model, prog: CrossbarProgram, x: np.ndarray, *,
                   noise_seed: Optional[int] = None, stochastic: bool = False, seed: int = 0,
                   sample: int = 0, taps=(), bn_hook=None,
                   record: Optional[Dict[int, np.ndarray]] = None,
                   tapped: Optional[Dict[int, np.ndarray]] = None) -> np.ndarray:
    """Eval-mode forward with every dense/conv product computed on the crossbar.

    ``noise_seed`` enables read noise (a fresh stream per seed). ``bn_hook``
    is called as ``bn_hook(index, layer, x)`` before each batch-norm layer
    runs, which lets callers replace its statistics in place.
    """
    x = model.check_input(x)
    rng = None
    if noise_seed is not None and prog.config.read_noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed), 0x52454144]))
    ctx = ForwardContext(training=False, stochastic=stochastic, seed=seed, sample=sample)
    binarized = prog.config.mode == "binarized"
    taps = set(taps)
    i = 0
    layers = model.layers
    while i < len(layers):
        layer = layers[i]
        lm = prog.layers.get(i)
        if lm is not None:
            absorb = binarized and lm.absorb_until is not None
            if isinstance(layer, Conv2d):
                n, _, h, w = x.shape
                rows = layer.im2col(x)
            else:
                rows = x
            y = analog_mvm(prog, rows, i, rng=rng, record=record, binarize=absorb)
            if absorb:
                y = sign(y)
            else:
                y = y + layer.params["b"]
            y = y.astype(model.dtype)
            if isinstance(layer, Conv2d):
                y = Conv2d.rows_to_maps(y, n, h, w)
            x = y
            if absorb:
                i = lm.absorb_until
                if tapped is not None and i in taps:
                    tapped[i] = x
                i += 1
                continue
        else:
            if bn_hook is not None and isinstance(layer, BatchNorm):
                bn_hook(i, layer, x)
            x = layer.forward(x, ctx)
        if tapped is not None and i in taps:
            tapped[i] = x
        i += 1
    return x


def crossbar_predict(model: Model, prog: CrossbarProgram, x: np.ndarray, batch_size: int = 2048,
                     noise_seed: Optional[int] = None) -> np.ndarray:
    out = [model.task_logits(faulty_forward(model, prog, x[s:s + batch_size],
                                            noise_seed=None if noise_seed is None else noise_seed + s))
           for s in range(0, len(x), batch_size)]
    return np.concatenate(out).argmax(axis=1)


def crossbar_accuracy(model: Model, prog: CrossbarProgram, x: np.ndarray, y: np.ndarray, **kw) -> float:
    return float((crossbar_predict(model, prog, x, **kw) == np.asarray(y)).mean())


@dataclass
class FaultMap:
    """Sparse per-cell defects stored as parallel arrays."""

    tile: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    row: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    col: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    kind: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    factor: np.ndarray = field(default_factory=lambda: np.zeros(0))
    seed: int = 0

    def __post_init__(self):
        cells = set(zip(self.tile.tolist(), self.row.tolist(), self.col.tolist()))
        if len(cells) != len(self.tile):
            raise ValueError("a cell may carry at most one fault")
        drift = self.factor[self.kind == DRIFT]
        if np.any((drift <= 0) | (drift > 1)):
            raise ValueError("drift factors must lie in (0, 1]")

    def __len__(self) -> int:
        return len(self.tile)

    @property
    def entries(self) -> Dict[Tuple[int, int, int], Tuple[str, Optional[float]]]:
        out = {}
        for t, r, c, k, f in zip(self.tile.tolist(), self.row.tolist(), self.col.tolist(),
                                 self.kind.tolist(), self.factor.tolist()):
            out[(t, r, c)] = (KIND_NAMES[k], f if k == DRIFT else None)
        return out

    def count(self, kind: str) -> int:
        return int((self.kind == KIND_CODES[kind]).sum())

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# faultmap v1 seed={self.seed}\n")
        for t, r, c, k, f in zip(self.tile.tolist(), self.row.tolist(), self.col.tolist(),
                                 self.kind.tolist(), self.factor.tolist()):
            if k == DRIFT:
                buf.write(f"{t},{r},{c},{KIND_NAMES[k]},{f!r}\n")
            else:
                buf.write(f"{t},{r},{c},{KIND_NAMES[k]}\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "FaultMap":
        seed = 0
        cols = ([], [], [], [], [])
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    if tok.startswith("seed="):
                        seed = int(tok[5:])
                continue
            parts = line.split(",")
            if len(parts) not in (4, 5) or parts[3] not in KIND_CODES:
                raise ValueError(f"line {lineno}: expected tile,row,col,kind[,factor], got {line!r}")
            kind = KIND_CODES[parts[3]]
            if kind == DRIFT and len(parts) != 5:
                raise ValueError(f"line {lineno}: drift entries need a factor")
            for store, val in zip(cols, (int(parts[0]), int(parts[1]), int(parts[2]), kind,
                                         float(parts[4]) if len(parts) == 5 else 1.0)):
                store.append(val)
        return cls(np.array(cols[0], np.int64), np.array(cols[1], np.int64), np.array(cols[2], np.int64),
                   np.array(cols[3], np.int8), np.array(cols[4], np.float64), seed)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "FaultMap":
        with open(path) as fh:
            return cls.from_text(fh.read())


def apply_fault_map(prog: CrossbarProgram, fmap: FaultMap) -> CrossbarProgram:
    """Return a copy of ``prog`` with every fault of ``fmap`` applied.

    Stuck cells are pinned and flagged so later variation leaves them alone;
    drift scales a healthy cell once, clamped at ``g_off``.
    """
    cfg = prog.config
    tiles = [t.copy() for t in prog.tiles]
    for tid in np.unique(fmap.tile):
        sel = fmap.tile == tid
        t = tiles[tid]
        rows, pcols, kinds, factors = fmap.row[sel], fmap.col[sel], fmap.kind[sel], fmap.factor[sel]
        for half, g, stuck in ((0, t.g_plus, t.stuck_plus), (1, t.g_minus, t.stuck_minus)):
            m = pcols % 2 == half
            r, c, k, f = rows[m], pcols[m] // 2, kinds[m], factors[m]
            on, off, dr = k == STUCK_ON, k == STUCK_OFF, k == DRIFT
            dr_ok = dr & ~stuck[r, c]
            g[r[dr_ok], c[dr_ok]] = np.maximum(g[r[dr_ok], c[dr_ok]] * f[dr_ok], cfg.g_off)
            g[r[on], c[on]] = cfg.g_on
            g[r[off], c[off]] = cfg.g_off
            stuck[r[on | off], c[on | off]] = True
    return prog.with_tiles(tiles)


def _sample_cells(prog: CrossbarProgram, rates: Tuple[float, ...], seed: int, salt: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), salt]))
    out = ([], [], [], [])
    bounds = np.cumsum(rates)
    for tid, t in enumerate(prog.tiles):
        r, c = t.shape
        u = rng.random((r, 2 * c))
        hit = u < bounds[-1]
        rr, cc = np.nonzero(hit)
        kind = np.searchsorted(bounds, u[rr, cc], side="right")
        out[0].append(np.full(len(rr), tid))
        out[1].append(rr)
        out[2].append(cc)
        out[3].append(kind)
    return [np.concatenate(a) if a else np.zeros(0, np.int64) for a in out]


def inject_faults(prog: CrossbarProgram, stuck_on_rate: float, stuck_off_rate: float,
                  seed: int) -> Tuple[CrossbarProgram, FaultMap]:
    """Independently fault every physical cell; returns the faulty program and its map."""
    if not (0 <= stuck_on_rate <= 1 and 0 <= stuck_off_rate <= 1):
        raise ValueError("fault rates must lie in [0, 1]")
    if stuck_on_rate + stuck_off_rate > 1 + 1e-12:
        raise ValueError("fault rates must sum to at most 1")
    tile, row, col, kind = _sample_cells(prog, (stuck_on_rate, stuck_off_rate), seed, 0x5354554B)
    codes = np.where(kind == 0, STUCK_ON, STUCK_OFF).astype(np.int8)
    fmap = FaultMap(tile.astype(np.int64), row.astype(np.int64), col.astype(np.int64), codes,
                    np.ones(len(tile)), int(seed))
    return apply_fault_map(prog, fmap), fmap


def inject_drift(prog: CrossbarProgram, rate: float, factor: float, seed: int
                 ) -> Tuple[CrossbarProgram, FaultMap]:
    """One-shot multiplicative conductance drift on a random fraction of cells."""
    if not 0 <= rate <= 1:
        raise ValueError("rate must lie in [0, 1]")
    tile, row, col, _ = _sample_cells(prog, (rate,), seed, 0x44524654)
    fmap = FaultMap(tile.astype(np.int64), row.astype(np.int64), col.astype(np.int64),
                    np.full(len(tile), DRIFT, np.int8), np.full(len(tile), float(factor)), int(seed))
    return apply_fault_map(prog, fmap), fmap


def apply_variation(prog: CrossbarProgram, sigma: float, seed: int) -> CrossbarProgram:
    """Multiply every healthy conductance by exp(N(0, sigma^2)) and clamp to [g_off, g_on]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return prog.copy()
    cfg = prog.config
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x56415249]))
    tiles = []
    for t in prog.tiles:
        t = t.copy()
        for g, stuck in ((t.g_plus, t.stuck_plus), (t.g_minus, t.stuck_minus)):
            varied = np.clip(g * np.exp(sigma * rng.standard_normal(g.shape)), cfg.g_off, cfg.g_on)
            g[...] = np.where(stuck, g, varied)
        tiles.append(t)
    return prog.with_tiles(tiles)


def with_reference(prog: CrossbarProgram, theta: Dict[int, np.ndarray],
                   polarity: Optional[Dict[int, np.ndarray]] = None) -> CrossbarProgram:
    """Attach per-tile sensing references and switch to BinarizedPartialSum mode."""
    tiles = list(prog.tiles)
    for tid, th in theta.items():
        pol = None if polarity is None else polarity.get(tid)
        tiles[tid] = replace(tiles[tid], theta=np.asarray(th, dtype=np.float64),
                             polarity=None if pol is None else np.asarray(pol, dtype=np.float64))
    return CrossbarProgram(tiles, prog.layers, replace(prog.config, mode="binarized"))
