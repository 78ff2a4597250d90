"""Branch-aware symmetric post-training quantization.

Each conv depth l shares one rescale coefficient R_l across all branches
(the max of every branch's weight and activation magnitudes at that depth),
so integer features from different branches stay directly comparable at the
concatenation. Dense layers use ordinary per-layer max-abs scaling.

Scale bookkeeping: activations entering the network are in [-1, 1] and are
stored as round(x * 2^n). A layer whose weights are scaled by R_w, whose
inputs arrive on scale S_in and whose outputs are stored on scale S_out
needs its accumulator rescaled by (S_in * R_w / S_out) / 2^n. The real ratio
r = S_in * R_w / S_out is approximated by mult / 2^15 (error < 2^-15) and the
2^-n folds into the shift, so each layer carries one (mult, shift = n + 15)
pair. For conv layers S_out = R_l and R_w = R_l, leaving r = S_in = R_{l-1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fxp import round_nearest
from .model import ModelParams, ModelSpec, forward_batch
from .train import _forward_caches

__all__ = [
    "CalibStats",
    "QLayer",
    "QuantizedModel",
    "calibrate",
    "compute_rescale",
    "quantize_weights",
    "quantize",
    "quantized_accuracy_ratio",
    "sweep_bits",
    "save_qmodel",
    "load_qmodel",
    "QMODEL_SCHEMA",
    "RATIO_SHIFT",
]

QMODEL_SCHEMA = "edgehar.qmodel/v1"
RATIO_SHIFT = 15  # fractional bits used to encode scale ratios in mult


@dataclass
class CalibStats:
    """Max absolute weights and layer outputs seen over a calibration set.

    conv_w[l][branch] / conv_o[l][branch] index conv depth l = 0..2;
    outputs are post-activation, pre-pool magnitudes from the FP32 net.
    """

    conv_w: list[dict[str, float]]
    conv_o: list[dict[str, float]]
    dense_w: list[float]
    dense_o: list[float]
    input_rows: dict[str, int]
    n_samples: int


def calibrate(spec: ModelSpec, params: ModelParams, calib_X: dict) -> CalibStats:
    """Collect per-(layer, branch) weight/activation magnitudes, layer by layer."""
    if spec.alpha_enabled:
        raise ValueError(
            "quantization applies to models without importance mixing; "
            "retrain without alpha first"
        )
    n = next(iter(calib_X.values())).shape[0]
    if n == 0:
        raise ValueError("calibration set is empty")
    _, ctx = _forward_caches(spec, params, calib_X)
    conv_w = [{} for _ in range(3)]
    conv_o = [{} for _ in range(3)]
    input_rows = {}
    for branch, cache, ws in zip(spec.branches, ctx["caches"], params.branch_weights):
        input_rows[branch.name] = int(np.asarray(calib_X[branch.name]).shape[1])
        for l in range(3):
            conv_w[l][branch.name] = float(np.abs(ws[l]).max())
            act = np.maximum(cache["layers"][l]["z"], 0)
            conv_o[l][branch.name] = float(act.max()) if act.size else 0.0
    dense_w = [float(np.abs(params.dense1).max()), float(np.abs(params.dense2).max())]
    hidden = np.maximum(ctx["z1"], 0)
    logits = ctx["h1"] @ params.dense2
    dense_o = [float(hidden.max()), float(np.abs(logits).max())]
    return CalibStats(conv_w, conv_o, dense_w, dense_o, input_rows, n)


def merge_stats(a: CalibStats, b: CalibStats) -> CalibStats:
    """Commutative max-merge of two calibration passes."""
    return CalibStats(
        [{k: max(d1[k], d2[k]) for k in d1} for d1, d2 in zip(a.conv_w, b.conv_w)],
        [{k: max(d1[k], d2[k]) for k in d1} for d1, d2 in zip(a.conv_o, b.conv_o)],
        [max(x, y) for x, y in zip(a.dense_w, b.dense_w)],
        [max(x, y) for x, y in zip(a.dense_o, b.dense_o)],
        dict(a.input_rows),
        a.n_samples + b.n_samples,
    )


def compute_rescale(stats: CalibStats, layer: int) -> float:
    """Shared rescale coefficient for conv depth `layer` (1-indexed 1..3):
    the max over branches of both weight and output magnitudes."""
    if not 1 <= layer <= 3:
        raise ValueError(f"conv depth must be 1..3, got {layer}")
    l = layer - 1
    r = max(max(stats.conv_w[l].values()), max(stats.conv_o[l].values()))
    if r <= 0.0:
        raise ValueError(f"dead conv depth {layer}: all weights and outputs are zero")
    return r


@dataclass
class QLayer:
    """One integer layer: weights plus its requantization parameters."""

    w_int: np.ndarray
    mult: int
    shift: int
    relu: bool = True
    pool: int | None = None


@dataclass
class QuantizedModel:
    """Integer weights, shared conv rescales, dense scales, and requant pairs."""

    spec: ModelSpec
    n_bits: int
    rescales: list[float]
    dense_scales: list[tuple[float, float]]  # (weight scale, output scale)
    branches: list[list[QLayer]]
    dense: list[QLayer]
    input_rows: dict[str, int]

    @property
    def storage_bits(self) -> int:
        return self.n_bits + 1

    @property
    def weight_words(self) -> int:
        return sum(l.w_int.size for ls in self.branches for l in ls) + sum(
            l.w_int.size for l in self.dense
        )

    @property
    def acc_width(self) -> int:
        """Accumulator width guaranteed to hold any in-range MAC sequence.

        32 bits covers the hardware target precision; wider experimental
        precisions get a correspondingly wider modeled register.
        """
        worst_taps = 1
        for branch in self.spec.branches:
            for i in range(3):
                k = branch.layers[i].kernel ** branch.conv_dim
                worst_taps = max(worst_taps, k * branch.layer_in_channels(i))
        for l in self.dense:
            worst_taps = max(worst_taps, l.w_int.shape[0])
        need = 2 * self.n_bits + int(np.ceil(np.log2(worst_taps))) + 2
        return max(32, need)


def _quantize_tensor(w: np.ndarray, scale: float, n_bits: int) -> np.ndarray:
    """Symmetric conversion round(w / scale * 2^n), clipped to +/-(2^n - 1).

    The symmetric clip (rather than the two's-complement minimum -2^n) keeps
    quantization an odd function of the weights.
    """
    lim = (1 << n_bits) - 1
    scaled = np.asarray(w, dtype=np.float64) * (2.0**n_bits / scale)
    q = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(q, -lim, lim).astype(np.int64)


def quantize_weights(
    params: ModelParams, rescales: list[float], n_bits: int
) -> list[list[np.ndarray]]:
    """Integer conv weights for every branch from the shared per-depth rescales."""
    if n_bits < 1:
        raise ValueError(f"n_bits must be >= 1, got {n_bits}")
    for r in rescales:
        if not r > 0:
            raise ValueError(f"rescale coefficients must be positive, got {r}")
    return [
        [_quantize_tensor(ws[l], rescales[l], n_bits) for l in range(3)]
        for ws in params.branch_weights
    ]


def _ratio_mult(r: float, n_bits: int) -> tuple[int, int]:
    """Encode a real scale ratio r as (mult, shift): r / 2^n ~= mult / 2^shift."""
    mult = round_nearest(r * (1 << RATIO_SHIFT))
    if mult < 1:
        raise ValueError(f"scale ratio {r} too small to encode with {RATIO_SHIFT} bits")
    return mult, n_bits + RATIO_SHIFT


def quantize(
    spec: ModelSpec, params: ModelParams, stats: CalibStats, n_bits: int
) -> QuantizedModel:
    """Build the full integer model from calibration statistics."""
    if spec.alpha_enabled:
        raise ValueError(
            "quantization applies to models without importance mixing; "
            "retrain without alpha first"
        )
    if n_bits > 15:
        raise ValueError(
            f"n_bits = {n_bits} magnitude bits exceeds the 16-bit storage cap"
        )
    rescales = [compute_rescale(stats, l) for l in (1, 2, 3)]
    w_ints = quantize_weights(params, rescales, n_bits)

    branches = []
    for branch, ws in zip(spec.branches, w_ints):
        layers = []
        scale_in = 1.0
        for l in range(3):
            mult, shift = _ratio_mult(scale_in, n_bits)
            layers.append(
                QLayer(ws[l], mult, shift, relu=True, pool=branch.layers[l].pool)
            )
            scale_in = rescales[l]
        branches.append(layers)

    d_scales = []
    dense = []
    scale_in = rescales[2]
    for j, (w, relu) in enumerate([(params.dense1, True), (params.dense2, False)]):
        w_scale = stats.dense_w[j]
        out_scale = stats.dense_o[j]
        if not w_scale > 0:
            raise ValueError(f"dense layer {j}: all-zero weights cannot be scaled")
        if not out_scale > 0:
            raise ValueError(f"dense layer {j}: dead outputs over the calibration set")
        mult, shift = _ratio_mult(scale_in * w_scale / out_scale, n_bits)
        dense.append(QLayer(_quantize_tensor(w, w_scale, n_bits), mult, shift, relu))
        d_scales.append((w_scale, out_scale))
        scale_in = out_scale

    qm = QuantizedModel(spec, n_bits, rescales, d_scales, branches, dense,
                        dict(stats.input_rows))
    _check_requant_headroom(qm)
    return qm


def _check_requant_headroom(qm: QuantizedModel) -> None:
    """The engine multiplies int64 accumulators by mult; keep that exact."""
    worst_mult = max(
        [l.mult for ls in qm.branches for l in ls] + [l.mult for l in qm.dense]
    )
    if (qm.acc_width - 1) + worst_mult.bit_length() > 62:
        raise ValueError(
            f"requant mult {worst_mult} leaves no headroom at accumulator width "
            f"{qm.acc_width}; rescale coefficients are implausibly large"
        )


# ---------------------------------------------------------------------------
# Accuracy-vs-precision metric
# ---------------------------------------------------------------------------

def quantized_accuracy_ratio(
    spec: ModelSpec,
    params: ModelParams,
    qmodel: QuantizedModel,
    test_set: tuple[dict, np.ndarray],
) -> float:
    """(integer argmax accuracy) / (FP32 argmax accuracy) on a labeled set."""
    from .engine import qinfer_batch

    X, y = test_set
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("test set is empty")
    fp_pred = np.argmax(forward_batch(spec, params, X), axis=1)
    fp_acc = float(np.mean(fp_pred == y))
    if fp_acc == 0.0:
        raise ValueError("FP32 accuracy is zero; the ratio is undefined")
    q_pred = qinfer_batch(qmodel, X)
    return float(np.mean(q_pred == y)) / fp_acc


def sweep_bits(
    spec: ModelSpec,
    params: ModelParams,
    test_set: tuple[dict, np.ndarray],
    n_range,
    calib_X: dict | None = None,
) -> list[tuple[int, float]]:
    """One (n, accuracy ratio) point per precision, sharing one calibration pass."""
    n_range = list(n_range)
    if not n_range:
        raise ValueError("n_range is empty")
    stats = calibrate(spec, params, calib_X if calib_X is not None else test_set[0])
    curve = []
    for n in n_range:
        qm = quantize(spec, params, stats, n)
        curve.append((n, quantized_accuracy_ratio(spec, params, qm, test_set)))
    return curve


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_qmodel(path, qm: QuantizedModel, meta: dict | None = None) -> None:
    from .model import _spec_to_dict
    from .persist import write_json_atomic

    doc = {
        "schema": QMODEL_SCHEMA,
        "n_bits": qm.n_bits,
        "rescales": [repr(r) for r in qm.rescales],
        "dense_scales": [[repr(a), repr(b)] for a, b in qm.dense_scales],
        "spec": _spec_to_dict(qm.spec),
        "branches": [
            [
                {"w": l.w_int.tolist(), "mult": l.mult, "shift": l.shift,
                 "pool": l.pool}
                for l in ls
            ]
            for ls in qm.branches
        ],
        "dense": [
            {"w": l.w_int.tolist(), "mult": l.mult, "shift": l.shift,
             "relu": l.relu}
            for l in qm.dense
        ],
        "input_rows": qm.input_rows,
        "meta": meta or {},
    }
    write_json_atomic(path, doc)


def load_qmodel(path) -> tuple[QuantizedModel, dict]:
    from .model import _spec_from_dict
    from .persist import read_json_checked

    doc = read_json_checked(path, QMODEL_SCHEMA)
    spec = _spec_from_dict(doc["spec"])
    branches = [
        [
            QLayer(np.asarray(l["w"], dtype=np.int64), l["mult"], l["shift"],
                   relu=True, pool=l["pool"])
            for l in ls
        ]
        for ls in doc["branches"]
    ]
    dense = [
        QLayer(np.asarray(l["w"], dtype=np.int64), l["mult"], l["shift"],
               relu=l["relu"])
        for l in doc["dense"]
    ]
    qm = QuantizedModel(
        spec,
        doc["n_bits"],
        [float(r) for r in doc["rescales"]],
        [(float(a), float(b)) for a, b in doc["dense_scales"]],
        branches,
        dense,
        {k: int(v) for k, v in doc["input_rows"].items()},
    )
    return qm, doc.get("meta", {})
