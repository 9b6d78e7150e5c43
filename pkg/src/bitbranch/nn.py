"""Quantized layer forwards, model decomposition, and the model container.

A model is an ordered list of layer specs plus one weight entry per layer,
and lives in exactly one stage:

* ``float``       weights are real tensors; reference semantics.
* ``quantized``   weights are integer code grids; activations are
                  quantized on the fly at each dense/conv input.
* ``decomposed``  weights are packed {-1,+1} bit planes; the forward pass
                  runs on the xnor/popcount kernel and is value-identical
                  to the quantized stage.

Convolution is lowered to patch extraction (im2col) followed by the same
GEMM as dense layers, so the bit kernel is the only inner loop everywhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import bitops, core, gemm, quant
from .core import DecompositionError, ShapeError, StageError

MODEL_MAGIC = b"#bitbranch-model-v1\n"

STAGES = ("float", "quantized", "decomposed")


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | batchnorm | activation
    in_features: int = 0
    out_features: int = 0
    kernel: tuple[int, int] = (0, 0)
    stride: int = 1
    padding: int = 0
    m_bits: int | None = None  # activation bits; None = full precision
    k_bits: int | None = None  # weight bits; None = full precision
    follows_bn: bool = False
    r: float = 1.0
    act: str = ""  # activation kind, for kind == "activation"
    eps: float = 1e-5  # batchnorm epsilon

    def weight_shape(self) -> tuple | None:
        if self.kind == "dense":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_features, self.in_features, *self.kernel)
        return None

    def reduction_len(self) -> int:
        if self.kind == "dense":
            return self.in_features
        if self.kind == "conv2d":
            return self.in_features * self.kernel[0] * self.kernel[1]
        raise ShapeError(f"{self.kind} layer has no reduction axis")


def dense(n_in: int, n_out: int, m_bits=None, k_bits=None, follows_bn=False, r=1.0) -> LayerSpec:
    return LayerSpec(kind="dense", in_features=n_in, out_features=n_out,
                     m_bits=m_bits, k_bits=k_bits, follows_bn=follows_bn, r=r)


def conv2d(c_in: int, c_out: int, kh: int, kw: int, stride=1, padding=0,
           m_bits=None, k_bits=None, follows_bn=False, r=1.0) -> LayerSpec:
    return LayerSpec(kind="conv2d", in_features=c_in, out_features=c_out,
                     kernel=(kh, kw), stride=stride, padding=padding,
                     m_bits=m_bits, k_bits=k_bits, follows_bn=follows_bn, r=r)


def batchnorm(features: int, eps: float = 1e-5) -> LayerSpec:
    return LayerSpec(kind="batchnorm", in_features=features, out_features=features, eps=eps)


def act_layer(kind: str) -> LayerSpec:
    return LayerSpec(kind="activation", act=kind)


@dataclass
class ModelState:
    """Layer topology plus weights, tagged with the stage they are stored in.

    ``flavor`` is "qnn" for one master weight per layer and "mbbn" for
    float models that keep one master per weight bit (leading branch axis).
    """

    stage: str
    specs: list[LayerSpec]
    weights: list  # per layer: ndarray | QuantizedTensor | EncodedMatrix | dict | None
    flavor: str = "qnn"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise StageError(f"unknown stage {self.stage!r}")
        if len(self.specs) != len(self.weights):
            raise ShapeError("one weight entry per layer spec required")


# ---------------------------------------------------------------------------
# Layer forwards
# ---------------------------------------------------------------------------

def _weight_matrix(spec: LayerSpec, w: np.ndarray) -> np.ndarray:
    """Flatten a weight tensor to (out, reduction)."""
    return np.asarray(w, dtype=np.float64).reshape(spec.out_features, spec.reduction_len())


def _gemm_stage(x2d: np.ndarray, spec: LayerSpec, w, stage: str, threads: int) -> np.ndarray:
    """Shared dense/conv core: rows of x2d against the layer weight."""
    if stage == "float":
        if not isinstance(w, np.ndarray):
            raise StageError("float stage requires a float weight tensor")
        return core.matmul_f(x2d, _weight_matrix(spec, w).T)

    if stage == "quantized":
        if not isinstance(w, quant.QuantizedTensor):
            raise StageError("quantized stage requires integer-coded weights")
        w_codes = w.codes.reshape(spec.out_features, spec.reduction_len())
        if w.grid != "odd":
            wt = w_codes.astype(np.float64) * w.d
            if spec.m_bits is not None:
                x2d = quant.dequantize(quant.quantize_linear(x2d, spec.m_bits))
            return core.matmul_f(x2d, wt.T)
        if spec.m_bits is None:
            wt = w_codes.astype(np.float64) * w.d
            return core.matmul_f(x2d, wt.T)
        xq = quant.quantize_odd(x2d, spec.m_bits)
        acc = core.matmul_f(xq.codes.astype(np.float64), w_codes.T.astype(np.float64))
        if spec.follows_bn:
            return acc
        return gemm.scale_output(acc, spec.m_bits, w.bits, spec.r)

    if stage == "decomposed":
        if isinstance(w, np.ndarray):
            # full-precision layer inside a decomposed model
            return core.matmul_f(x2d, _weight_matrix(spec, w).T)
        if not isinstance(w, gemm.EncodedMatrix):
            raise StageError("decomposed stage requires bit-plane weights")
        if spec.m_bits is None:
            # full-precision activations: no planes to feed the bit kernel,
            # so run the dequantized codes exactly like the quantized stage
            wt = gemm.decode_codes(w).astype(np.float64) * (1.0 / ((1 << w.bits) - 1))
            return core.matmul_f(x2d, wt.T)
        xq = quant.quantize_odd(x2d, spec.m_bits)
        x_enc = gemm.encode_codes(xq.codes, spec.m_bits)
        acc = gemm.encoded_gemm(x_enc, w, threads=threads)
        if spec.follows_bn:
            return acc.astype(np.float64)
        return gemm.scale_output(acc, spec.m_bits, w.bits, spec.r)

    raise StageError(f"unknown stage {stage!r}")


def dense_forward(x: np.ndarray, spec: LayerSpec, w, stage: str, threads: int = 1) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != spec.in_features:
        raise ShapeError(f"dense input {x.shape} does not match in_features={spec.in_features}")
    return _gemm_stage(np.asarray(x, dtype=np.float64), spec, w, stage, threads)


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Extract conv patches: (B, C, H, W) -> (B * OH * OW, C * kh * kw)."""
    b, c, h, w = x.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {h}x{w} (pad {padding})")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((b, oh, ow, c, kh, kw), dtype=np.float64)
    for i in range(oh):
        for j in range(ow):
            hi, wj = i * stride, j * stride
            cols[:, i, j] = x[:, :, hi:hi + kh, wj:wj + kw]
    return cols.reshape(b * oh * ow, c * kh * kw)


def conv2d_forward(x: np.ndarray, spec: LayerSpec, w, stage: str, threads: int = 1) -> np.ndarray:
    """Convolution as im2col + the stage GEMM.

    In quantized/decomposed stages the patch matrix (padding zeros
    included) is what gets quantized: the odd grid has no zero, so padded
    positions land on the nearest odd level like any other value.
    """
    if x.ndim != 4 or x.shape[1] != spec.in_features:
        raise ShapeError(f"conv input {x.shape} does not match in_channels={spec.in_features}")
    b = x.shape[0]
    kh, kw = spec.kernel
    oh = (x.shape[2] + 2 * spec.padding - kh) // spec.stride + 1
    ow = (x.shape[3] + 2 * spec.padding - kw) // spec.stride + 1
    patches = im2col(np.asarray(x, dtype=np.float64), kh, kw, spec.stride, spec.padding)
    out = _gemm_stage(patches, spec, w, stage, threads)
    return out.reshape(b, oh, ow, spec.out_features).transpose(0, 3, 1, 2)


def batchnorm_forward(x: np.ndarray, gamma, beta, mean, var, eps: float = 1e-5) -> np.ndarray:
    """Inference-mode affine normalization along the channel axis."""
    gamma, beta, mean, var = (np.asarray(v, dtype=np.float64) for v in (gamma, beta, mean, var))
    if not gamma.shape == beta.shape == mean.shape == var.shape:
        raise ShapeError("batchnorm parameter lengths differ")
    x = np.asarray(x, dtype=np.float64)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return (x - mean.reshape(shape)) / np.sqrt(var.reshape(shape) + eps) * gamma.reshape(shape) \
        + beta.reshape(shape)


# ---------------------------------------------------------------------------
# Whole-model forward
# ---------------------------------------------------------------------------

def _mbbn_dense_forward(x: np.ndarray, spec: LayerSpec, masters: np.ndarray) -> np.ndarray:
    """Simulated multi-branch forward on float branch masters.

    Each branch weight is binarized and the input's trig-encoder planes are
    combined with weights 2^(m+k-2); algebraically this is the integer
    reconstruction product, computed here in (exact) float.
    """
    m_bits, k_bits = spec.m_bits, spec.k_bits
    digits = quant.mbit_encoder_digits(x, m_bits).astype(np.float64)
    digits = digits.reshape(m_bits, *x.shape)
    recon_x = np.tensordot(2.0 ** np.arange(m_bits), digits, axes=1)
    recon_w = np.zeros((spec.out_features, spec.in_features))
    for k in range(k_bits):
        recon_w += (1 << k) * quant.binarize(masters[k])
    acc = core.matmul_f(recon_x, recon_w.T)
    if spec.follows_bn:
        return acc
    return gemm.scale_output(acc, m_bits, k_bits, spec.r)


def model_forward(m: ModelState, x: np.ndarray, threads: int = 1) -> np.ndarray:
    """Run the stage-appropriate forward pass over all layers."""
    h = np.asarray(x, dtype=np.float64)
    for spec, w in zip(m.specs, m.weights):
        if spec.kind == "dense":
            if m.flavor == "mbbn" and m.stage == "float":
                h = _mbbn_dense_forward(h, spec, w)
            else:
                h = dense_forward(h, spec, w, m.stage, threads)
        elif spec.kind == "conv2d":
            h = conv2d_forward(h, spec, w, m.stage, threads)
        elif spec.kind == "batchnorm":
            h = batchnorm_forward(h, w["gamma"], w["beta"], w["mean"], w["var"], spec.eps)
        elif spec.kind == "activation":
            h = quant.activation(h, spec.act)
        else:
            raise StageError(f"unknown layer kind {spec.kind!r}")
    return h


def predict(m: ModelState, x: np.ndarray, threads: int = 1) -> np.ndarray:
    return np.argmax(model_forward(m, x, threads), axis=1)


def accuracy(m: ModelState, x: np.ndarray, y: np.ndarray, threads: int = 1) -> float:
    return float(np.mean(predict(m, x, threads) == np.asarray(y)))


# ---------------------------------------------------------------------------
# Stage transitions
# ---------------------------------------------------------------------------

def quantize_model(m: ModelState, grid: str = "odd") -> ModelState:
    """Quantize every weighted layer's float weights onto its K-bit grid."""
    if m.stage != "float" or m.flavor != "qnn":
        raise StageError("quantize_model expects a float-stage qnn model")
    weights = []
    for spec, w in zip(m.specs, m.weights):
        if spec.kind in ("dense", "conv2d") and spec.k_bits is not None:
            if grid == "odd":
                weights.append(quant.quantize_odd(w, spec.k_bits))
            elif grid == "linear":
                weights.append(quant.quantize_linear(w, spec.k_bits))
            else:
                raise core.ConfigError(f"unknown grid {grid!r}")
        else:
            weights.append(w)
    return ModelState(stage="quantized", specs=list(m.specs), weights=weights)


def decompose_model(m: ModelState) -> ModelState:
    """Expand odd-grid weights into packed bit planes; exact by construction."""
    if m.stage != "quantized":
        raise StageError("decompose_model expects a quantized-stage model")
    weights = []
    for spec, w in zip(m.specs, m.weights):
        if spec.kind in ("dense", "conv2d") and isinstance(w, quant.QuantizedTensor):
            if w.grid != "odd":
                if np.any(w.codes % 2 == 0):
                    raise DecompositionError(
                        "linear-grid weights contain even codes (including 0), which have "
                        "no {-1,+1} digit expansion; quantize on the odd grid instead"
                    )
                raise DecompositionError("only odd-grid weights can be decomposed")
            codes = w.codes.reshape(spec.out_features, spec.reduction_len())
            weights.append(gemm.encode_codes(codes, w.bits))
        else:
            weights.append(w)
    return ModelState(stage="decomposed", specs=list(m.specs), weights=weights)


# ---------------------------------------------------------------------------
# Model file format
# ---------------------------------------------------------------------------
#
# magic line, one JSON header line (stage, flavor, layer specs), then one
# binary payload per weighted layer in order:
#   float tensors       u64 rank, u64 dims, f32 data
#   quantized codes     u64 rank, u64 dims, i16 codes   (t, grid in header)
#   decomposed planes   per plane: u64 n_valid, u64 words. Planes are packed
#                       contiguously over all rows (lowest plane first), so
#                       the payload is rows*cols bits per plane plus at most
#                       63 pad bits.
#   batchnorm           four f32 tensors: gamma, beta, mean, var

def _spec_to_json(spec: LayerSpec) -> dict:
    d = {"kind": spec.kind}
    if spec.kind in ("dense", "conv2d"):
        d.update({"in": spec.in_features, "out": spec.out_features,
                  "M": spec.m_bits, "K": spec.k_bits,
                  "follows_bn": spec.follows_bn, "r": spec.r})
        if spec.kind == "conv2d":
            d.update({"kernel": list(spec.kernel), "stride": spec.stride,
                      "padding": spec.padding})
    elif spec.kind == "batchnorm":
        d.update({"features": spec.in_features, "eps": spec.eps})
    elif spec.kind == "activation":
        d["act"] = spec.act
    return d


def _spec_from_json(d: dict) -> LayerSpec:
    kind = d["kind"]
    if kind == "dense":
        return dense(d["in"], d["out"], d["M"], d["K"], d["follows_bn"], d["r"])
    if kind == "conv2d":
        return conv2d(d["in"], d["out"], *d["kernel"], stride=d["stride"],
                      padding=d["padding"], m_bits=d["M"], k_bits=d["K"],
                      follows_bn=d["follows_bn"], r=d["r"])
    if kind == "batchnorm":
        return batchnorm(d["features"], d["eps"])
    if kind == "activation":
        return act_layer(d["act"])
    raise StageError(f"unknown layer kind {kind!r}")


def _encoded_to_contiguous_planes(enc: gemm.EncodedMatrix) -> list[bitops.BitPlane]:
    n = enc.rows * enc.cols
    planes = []
    for m in range(enc.bits):
        digits = np.empty(n, dtype=np.int8)
        for r in range(enc.rows):
            plane = bitops.BitPlane(words=enc.words[r, m], n_valid=enc.cols)
            digits[r * enc.cols:(r + 1) * enc.cols] = bitops.unpack(plane)
        planes.append(bitops.pack(digits, n))
    return planes


def _encoded_from_contiguous_planes(planes: list[bitops.BitPlane], rows: int, cols: int) -> gemm.EncodedMatrix:
    bits = len(planes)
    n_words = (cols + bitops.WORD_BITS - 1) // bitops.WORD_BITS
    words = np.zeros((rows, bits, n_words), dtype=np.uint64)
    for m, plane in enumerate(planes):
        digits = bitops.unpack(plane)
        for r in range(rows):
            words[r, m] = bitops.pack(digits[r * cols:(r + 1) * cols], cols).words
    return gemm.EncodedMatrix(bits=bits, rows=rows, cols=cols, words=words)


def _weight_meta(spec: LayerSpec, w) -> dict:
    if isinstance(w, np.ndarray):
        return {"form": "float", "shape": list(w.shape)}
    if isinstance(w, quant.QuantizedTensor):
        return {"form": "quantized", "bits": w.bits, "t": w.t, "grid": w.grid,
                "shape": list(w.codes.shape)}
    if isinstance(w, gemm.EncodedMatrix):
        return {"form": "encoded", "bits": w.bits, "rows": w.rows, "cols": w.cols}
    if isinstance(w, dict):
        return {"form": "batchnorm"}
    return {"form": "none"}


def save_model(m: ModelState, path: str) -> None:
    header = {
        "stage": m.stage,
        "flavor": m.flavor,
        "layers": [_spec_to_json(s) for s in m.specs],
        "weights": [_weight_meta(s, w) for s, w in zip(m.specs, m.weights)],
    }
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for w in m.weights:
            if isinstance(w, np.ndarray):
                fh.write(core.tensor_to_bytes(w))
            elif isinstance(w, quant.QuantizedTensor):
                fh.write(core.int_tensor_to_bytes(w.codes))
            elif isinstance(w, gemm.EncodedMatrix):
                for plane in _encoded_to_contiguous_planes(w):
                    fh.write(bitops.bitplane_to_bytes(plane))
            elif isinstance(w, dict):
                for key in ("gamma", "beta", "mean", "var"):
                    fh.write(core.tensor_to_bytes(w[key]))


def load_model(path: str) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise IOError(f"{path}: not a model file (bad magic)")
        header = json.loads(fh.readline().decode())
        blob = fh.read()
    specs = [_spec_from_json(d) for d in header["layers"]]
    weights = []
    off = 0
    for spec, meta in zip(specs, header["weights"]):
        form = meta["form"]
        if form == "float":
            w, used = core.tensor_from_bytes(blob[off:])
            weights.append(w.reshape(meta["shape"]))
            off += used
        elif form == "quantized":
            codes, used = core.int_tensor_from_bytes(blob[off:])
            off += used
            bits, t = meta["bits"], meta["t"]
            if meta["grid"] == "odd":
                d = 1.0 / ((1 << bits) - 1)
            else:
                d = t if bits == 1 else t / ((1 << (bits - 1)) - 1)
            weights.append(quant.QuantizedTensor(
                codes=codes.reshape(meta["shape"]), bits=bits, t=t, d=d, grid=meta["grid"]))
        elif form == "encoded":
            planes = []
            for _ in range(meta["bits"]):
                plane, used = bitops.bitplane_from_bytes(blob[off:])
                planes.append(plane)
                off += used
            weights.append(_encoded_from_contiguous_planes(planes, meta["rows"], meta["cols"]))
        elif form == "batchnorm":
            w = {}
            for key in ("gamma", "beta", "mean", "var"):
                w[key], used = core.tensor_from_bytes(blob[off:])
                off += used
            weights.append(w)
        else:
            weights.append(None)
    return ModelState(stage=header["stage"], specs=specs, weights=weights,
                      flavor=header["flavor"])


def weight_payload_bytes(m: ModelState) -> int:
    """Serialized weight bytes, excluding headers and plane length fields."""
    total = 0
    for w in m.weights:
        if isinstance(w, np.ndarray):
            total += 4 * w.size
        elif isinstance(w, quant.QuantizedTensor):
            total += 2 * w.codes.size
        elif isinstance(w, gemm.EncodedMatrix):
            n = w.rows * w.cols
            total += w.bits * 8 * ((n + bitops.WORD_BITS - 1) // bitops.WORD_BITS)
        elif isinstance(w, dict):
            total += sum(4 * np.asarray(w[k]).size for k in ("gamma", "beta", "mean", "var"))
    return total


def compression_ratio(m: ModelState) -> float:
    """Weight storage of the float model divided by this model's storage."""
    float_bytes = 0
    for spec, w in zip(m.specs, m.weights):
        shape = spec.weight_shape()
        if shape is not None:
            float_bytes += 4 * int(np.prod(shape))
        elif isinstance(w, dict):
            float_bytes += sum(4 * np.asarray(w[k]).size for k in ("gamma", "beta", "mean", "var"))
    mine = weight_payload_bytes(m)
    return float_bytes / mine if mine else 1.0


# ---------------------------------------------------------------------------
# Model builders
# ---------------------------------------------------------------------------

def mlp_specs(dims: list[int], m_bits=None, k_bits=None, act: str = "htanh",
              quantize_input: bool = False) -> list[LayerSpec]:
    """Dense stack with activations between hidden layers (none after logits).

    By default the first dense layer keeps full-precision activations (the
    usual first-layer convention); pass ``quantize_input=True`` to quantize
    the raw input as well.
    """
    specs = []
    for i in range(len(dims) - 1):
        layer_m = m_bits if (i > 0 or quantize_input) else None
        specs.append(dense(dims[i], dims[i + 1], m_bits=layer_m, k_bits=k_bits))
        if i < len(dims) - 2:
            specs.append(act_layer(act))
    return specs


def init_mlp(dims: list[int], rng: np.random.Generator, m_bits=None, k_bits=None,
             act: str = "htanh", flavor: str = "qnn",
             quantize_input: bool = False) -> ModelState:
    """Float-stage MLP with uniform fan-in init, masters inside [-1, 1].

    mbbn models are dense-only (the digit encoders act as activations) and
    always encode their input, since every branch needs digit planes.
    """
    specs = mlp_specs(dims, m_bits, k_bits, act,
                      quantize_input=quantize_input or flavor == "mbbn")
    weights = []
    for spec in specs:
        if spec.kind == "dense":
            bound = min(1.0, np.sqrt(6.0 / (spec.in_features + spec.out_features)))
            shape = spec.weight_shape()
            if flavor == "mbbn":
                shape = (spec.k_bits,) + shape
            weights.append(rng.uniform(-bound, bound, size=shape))
        else:
            weights.append(None)
    if flavor == "mbbn":
        specs = [s for s in specs if s.kind == "dense"]
        weights = [w for w in weights if w is not None]
    return ModelState(stage="float", specs=specs, weights=weights, flavor=flavor)


def with_bits(m: ModelState, m_bits: int | None, k_bits: int | None,
              keep_full_precision: bool = False) -> ModelState:
    """Copy of the model with every weighted layer's (M, K) replaced.

    With ``keep_full_precision`` layers currently at None stay at None,
    so a full-precision first layer survives a global bit-width change.
    """
    def swap(spec):
        if spec.kind not in ("dense", "conv2d"):
            return spec
        new_m, new_k = m_bits, k_bits
        if keep_full_precision:
            new_m = None if spec.m_bits is None else m_bits
            new_k = None if spec.k_bits is None else k_bits
        return replace(spec, m_bits=new_m, k_bits=new_k)

    specs = [swap(s) for s in m.specs]
    return ModelState(stage=m.stage, specs=specs, weights=list(m.weights), flavor=m.flavor)
