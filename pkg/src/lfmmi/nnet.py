"""Feed-forward TDNN / factorized-TDNN networks with hand-written backprop.

Activations are ``(N, T, D)`` arrays (a 2-D ``(T, D)`` input is treated as a
single sequence).  Splicing layers use "valid" convolution in time: a layer
with offsets ``O`` shortens the sequence by ``max(O) - min(O)`` frames, and a
subsample layer keeps frames ``0, s, 2s, ...``.
"""
from __future__ import annotations

import copy
import io
from dataclasses import dataclass, field

import numpy as np

KINDS = ("affine", "relu", "batchnorm", "tdnn", "tdnnf", "subsample")
BN_EPS = 1e-5
BN_MOMENTUM = 0.99
MODEL_MAGIC = "CHFG01"


class InsufficientContextError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    dim_in: int
    dim_out: int
    offsets: tuple = ()
    bottleneck: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "offsets", tuple(int(o) for o in self.offsets))
        if self.kind in ("tdnn", "tdnnf"):
            if not self.offsets or list(self.offsets) != sorted(set(self.offsets)):
                raise ValueError(f"{self.kind} needs non-empty sorted unique offsets")
        if self.kind == "tdnnf" and not 0 < self.bottleneck < self.dim_out:
            raise ValueError("tdnnf bottleneck must satisfy 0 < bottleneck < dim_out")
        if self.kind in ("relu", "batchnorm", "subsample") and self.dim_in != self.dim_out:
            raise ValueError(f"{self.kind} must preserve dimension")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def splice(self):
        return self.offsets if self.kind in ("tdnn", "tdnnf") else (0,)

    def to_text(self):
        parts = [self.kind, f"dim_in={self.dim_in}", f"dim_out={self.dim_out}"]
        if self.kind in ("tdnn", "tdnnf"):
            parts.append("offsets=" + ",".join(map(str, self.offsets)))
        if self.kind == "tdnnf":
            parts.append(f"bottleneck={self.bottleneck}")
        if self.kind == "subsample":
            parts.append(f"stride={self.stride}")
        return " ".join(parts)

    @classmethod
    def from_text(cls, text):
        kind, *kv = text.split()
        kw = dict(item.split("=", 1) for item in kv)
        return cls(kind, int(kw["dim_in"]), int(kw["dim_out"]),
                   tuple(int(v) for v in kw["offsets"].split(",")) if "offsets" in kw else (),
                   int(kw.get("bottleneck", 0)), int(kw.get("stride", 1)))


def compute_context(layers) -> tuple[int, int]:
    """Left/right input context needed for one output frame.

    Walks the stack from the output back, expanding the set of required frame
    offsets: a splice with offsets ``O`` maps ``c -> c + o``; a subsample of
    stride ``s`` maps ``c -> c * s``.
    """
    needed = {0}
    for spec in reversed(list(layers)):
        if spec.kind == "subsample":
            needed = {c * spec.stride for c in needed}
        elif spec.kind in ("tdnn", "tdnnf"):
            needed = {c + o for c in needed for o in spec.offsets}
    return -min(needed), max(needed)


def total_stride(layers):
    s = 1
    for spec in layers:
        if spec.kind == "subsample":
            s *= spec.stride
    return s


def output_frames(layers, num_input_frames):
    """Frame count produced from ``num_input_frames`` input frames."""
    t = num_input_frames
    for spec in layers:
        if spec.kind == "subsample":
            t = -(-t // spec.stride)
        else:
            t -= spec.splice[-1] - spec.splice[0]
        if t < 1:
            return 0
    return t


def _splice(x, offsets):
    lo, hi = offsets[0], offsets[-1]
    T = x.shape[1] - (hi - lo)
    if len(offsets) == 1:
        return x[:, offsets[0] - lo: offsets[0] - lo + T]
    return np.concatenate([x[:, o - lo: o - lo + T] for o in offsets], axis=2)


def _splice_back(g, offsets, T_in):
    lo = offsets[0]
    N, T, DK = g.shape
    D = DK // len(offsets)
    gx = np.zeros((N, T_in, D), dtype=g.dtype)
    for k, o in enumerate(offsets):
        gx[:, o - lo: o - lo + T] += g[:, :, k * D:(k + 1) * D]
    return gx


def _rows(a):
    return a.reshape(-1, a.shape[-1])


def semi_orthogonal_step(m, nu=0.125):
    """One step pulling the rows of ``m`` towards orthonormal-up-to-scale.

    With ``P = M M^T`` and ``alpha2 = tr(P P^T) / tr(P)`` the update is
    ``M - (4 nu / alpha2) (P - alpha2 I) M``.  Dividing by ``alpha2`` keeps
    the step size independent of the scale of ``M``; matrices with
    ``P = c^2 I`` are fixed points.
    """
    m = np.asarray(m)
    if m.shape[0] > m.shape[1]:
        raise ValueError("semi_orthogonal_step needs rows <= cols")
    if not 0 < nu <= 0.125:
        raise ValueError("nu must lie in (0, 0.125]")
    M = m.astype(np.float64)
    P = M @ M.T
    trP = np.trace(P)
    if trP == 0:
        return m.copy()
    alpha2 = np.sum(P * P) / trP
    P[np.diag_indices_from(P)] -= alpha2
    return (M - (4 * nu / alpha2) * (P @ M)).astype(m.dtype)


def orthogonality_error(m):
    M = np.asarray(m, dtype=np.float64)
    P = M @ M.T
    alpha2 = np.sum(P * P) / np.trace(P)
    return float(np.linalg.norm(P - alpha2 * np.eye(len(P))))


@dataclass
class ForwardResult:
    acts: list  # input to each layer, then the final output
    caches: list
    output: np.ndarray
    xent_output: np.ndarray | None = None
    squeeze: bool = False


@dataclass
class BackwardResult:
    input_grad: np.ndarray
    grads: list  # per layer: dict name -> array
    xent_grads: dict | None = None
    factors: dict = field(default_factory=dict)  # "i.W" -> (input rows, output-deriv rows)


class Network:
    """A stack of layers with per-layer parameters.

    Parameters are float32; batch statistics are accumulated in float64.
    ``xent_dim`` adds a second affine head fed by the input of the final
    (affine) layer, used for cross-entropy regularisation.
    """

    def __init__(self, layers, params=None, buffers=None, xent_params=None, seed=0,
                 dtype=np.float32, xent_dim=None):
        self.layers = [s if isinstance(s, LayerSpec) else LayerSpec(*s) for s in layers]
        for a, b in zip(self.layers, self.layers[1:]):
            if a.dim_out != b.dim_in:
                raise ValueError(f"dimension mismatch: {a.kind}({a.dim_out}) -> {b.kind}({b.dim_in})")
        self.dtype = np.dtype(dtype)
        self.context = compute_context(self.layers)
        self.stride = total_stride(self.layers)
        rng = np.random.default_rng(seed)
        if params is None:
            params, buffers = self._init_params(rng)
        self.params = params
        self.buffers = buffers if buffers is not None else [{} for _ in self.layers]
        if xent_params is None and xent_dim:
            last = self.layers[-1]
            if last.kind != "affine":
                raise ValueError("xent head requires a final affine layer")
            a = 1.0 / np.sqrt(last.dim_in)
            xent_params = {"W": rng.uniform(-a, a, (xent_dim, last.dim_in)).astype(self.dtype),
                           "b": np.zeros(xent_dim, dtype=self.dtype)}
        self.xent_params = xent_params

    @property
    def dim_in(self):
        return self.layers[0].dim_in

    @property
    def dim_out(self):
        return self.layers[-1].dim_out

    def _init_params(self, rng):
        params, buffers = [], []
        for spec in self.layers:
            p, b = {}, {}
            fan_in = spec.dim_in * len(spec.splice)
            if spec.kind in ("affine", "tdnn"):
                a = 1.0 / np.sqrt(fan_in)
                p["W"] = rng.uniform(-a, a, (spec.dim_out, fan_in))
                p["b"] = np.zeros(spec.dim_out)
            elif spec.kind == "tdnnf":
                a = 1.0 / np.sqrt(fan_in)
                M = rng.uniform(-a, a, (spec.bottleneck, fan_in))
                for _ in range(20):
                    M = semi_orthogonal_step(M, 0.125)
                p["M"] = M
                a = 1.0 / np.sqrt(spec.bottleneck)
                p["W"] = rng.uniform(-a, a, (spec.dim_out, spec.bottleneck))
                p["b"] = np.zeros(spec.dim_out)
            elif spec.kind == "batchnorm":
                p["gamma"] = np.ones(spec.dim_out)
                p["beta"] = np.zeros(spec.dim_out)
                b["mean"] = np.zeros(spec.dim_out)
                b["var"] = np.ones(spec.dim_out)
            params.append({k: v.astype(self.dtype) for k, v in p.items()})
            buffers.append({k: v.astype(self.dtype) for k, v in b.items()})
        return params, buffers

    # parameter access -------------------------------------------------

    def param_items(self):
        for i, p in enumerate(self.params):
            for k in sorted(p):
                yield f"{i}.{k}", p[k]
        if self.xent_params is not None:
            for k in sorted(self.xent_params):
                yield f"xent.{k}", self.xent_params[k]

    def num_params(self):
        return sum(v.size for _, v in self.param_items())

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        net = self.copy()
        net.dtype = np.dtype(dtype)
        net.params = [{k: v.astype(dtype) for k, v in p.items()} for p in net.params]
        net.buffers = [{k: v.astype(dtype) for k, v in b.items()} for b in net.buffers]
        if net.xent_params is not None:
            net.xent_params = {k: v.astype(dtype) for k, v in net.xent_params.items()}
        return net

    def same_architecture(self, other):
        return (self.layers == other.layers and
                (self.xent_params is None) == (other.xent_params is None) and
                all(a.shape == b.shape for (_, a), (_, b) in zip(self.param_items(), other.param_items())))

    # forward / backward -----------------------------------------------

    def forward(self, x, training=True) -> ForwardResult:
        x = np.asarray(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.dim_in:
            raise ValueError(f"input dim {x.shape[-1]} != {self.dim_in}")
        if output_frames(self.layers, x.shape[1]) < 1:
            left, right = self.context
            raise InsufficientContextError(
                f"insufficient context: {x.shape[1]} frames, need at least {left + right + 1}")
        x = x.astype(self.dtype, copy=False)
        acts, caches = [x], []
        for spec, p, buf in zip(self.layers, self.params, self.buffers):
            x, cache = self._layer_forward(spec, p, buf, x, training)
            acts.append(x)
            caches.append(cache)
        xo = None
        if self.xent_params is not None:
            h = acts[-2]
            xo = h @ self.xent_params["W"].T + self.xent_params["b"]
        return ForwardResult(acts, caches, x, xo, squeeze)

    def _layer_forward(self, spec, p, buf, x, training):
        k = spec.kind
        if k == "affine":
            return x @ p["W"].T + p["b"], None
        if k == "tdnn":
            s = _splice(x, spec.offsets)
            return s @ p["W"].T + p["b"], s
        if k == "tdnnf":
            s = _splice(x, spec.offsets)
            h = s @ p["M"].T
            return h @ p["W"].T + p["b"], (s, h)
        if k == "relu":
            return np.maximum(x, 0), None
        if k == "subsample":
            return x[:, ::spec.stride], None
        # batchnorm
        if training:
            r = _rows(x)
            mean = r.mean(axis=0, dtype=np.float64)
            var = ((r - mean) ** 2).mean(axis=0, dtype=np.float64)
        else:
            mean = buf["mean"].astype(np.float64)
            var = buf["var"].astype(np.float64)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = ((x - mean) * inv_std).astype(self.dtype)
        return xhat * p["gamma"] + p["beta"], (xhat, inv_std.astype(self.dtype), mean, var, training)

    def backward(self, fwd: ForwardResult, grad_out, grad_xent=None, keep_factors=False) -> BackwardResult:
        """Reverse-mode pass; ``grad_out`` is dLoss/dOutput (same shape as the output)."""
        g = np.asarray(grad_out, dtype=self.dtype)
        if fwd.squeeze and g.ndim == 2:
            g = g[None]
        grads = [None] * len(self.layers)
        factors = {}
        xent_grads = None
        gx_head = None
        if self.xent_params is not None:
            h = fwd.acts[-2]
            if grad_xent is None:
                xent_grads = {k: np.zeros_like(v) for k, v in self.xent_params.items()}
            else:
                gxo = np.asarray(grad_xent, dtype=self.dtype)
                if fwd.squeeze and gxo.ndim == 2:
                    gxo = gxo[None]
                xent_grads = {"W": _rows(gxo).T @ _rows(h), "b": _rows(gxo).sum(axis=0)}
                gx_head = gxo @ self.xent_params["W"]
                if keep_factors:
                    factors["xent.W"] = (_rows(h), _rows(gxo), True)
        for i in range(len(self.layers) - 1, -1, -1):
            spec, p, x = self.layers[i], self.params[i], fwd.acts[i]
            g, grads[i] = self._layer_backward(spec, p, x, fwd.caches[i], g, factors if keep_factors else None, i)
            if i == len(self.layers) - 1 and gx_head is not None:
                g = g + gx_head
        if fwd.squeeze:
            g = g[0]
        return BackwardResult(g, grads, xent_grads, factors)

    def _layer_backward(self, spec, p, x, cache, g, factors, i):
        k = spec.kind
        if k in ("affine", "tdnn"):
            inp = x if k == "affine" else cache
            g2, i2 = _rows(g), _rows(inp)
            gr = {"W": g2.T @ i2, "b": g2.sum(axis=0)}
            if factors is not None:
                factors[f"{i}.W"] = (i2, g2, True)
            gin = g @ p["W"]
            if k == "tdnn":
                gin = _splice_back(gin, spec.offsets, x.shape[1])
            return gin, gr
        if k == "tdnnf":
            s, h = cache
            g2 = _rows(g)
            gr = {"W": g2.T @ _rows(h), "b": g2.sum(axis=0)}
            gh = g @ p["W"]
            gr["M"] = _rows(gh).T @ _rows(s)
            if factors is not None:
                factors[f"{i}.W"] = (_rows(h), g2, True)
                factors[f"{i}.M"] = (_rows(s), _rows(gh), False)
            return _splice_back(gh @ p["M"], spec.offsets, x.shape[1]), gr
        if k == "relu":
            return g * (x > 0), {}
        if k == "subsample":
            gin = np.zeros_like(x)
            gin[:, ::spec.stride] = g
            return gin, {}
        xhat, inv_std, _, _, training = cache
        g2 = _rows(g)
        gr = {"gamma": (g2 * _rows(xhat)).sum(axis=0, dtype=np.float64).astype(self.dtype),
              "beta": g2.sum(axis=0, dtype=np.float64).astype(self.dtype)}
        gxhat = g * p["gamma"]
        if not training:
            return gxhat * inv_std, gr
        R = g2.shape[0]
        r = _rows(gxhat)
        s1 = r.sum(axis=0, dtype=np.float64)
        s2 = (r * _rows(xhat)).sum(axis=0, dtype=np.float64)
        gin = (inv_std * (gxhat - (s1 + xhat * s2) / R)).astype(self.dtype)
        return gin, gr

    def accumulate_bn_stats(self, fwd: ForwardResult, momentum=BN_MOMENTUM):
        """Fold the batch statistics of a training-mode forward into the running averages."""
        for spec, buf, cache in zip(self.layers, self.buffers, fwd.caches):
            if spec.kind == "batchnorm" and cache[4]:
                buf["mean"] = (momentum * buf["mean"] + (1 - momentum) * cache[2]).astype(self.dtype)
                buf["var"] = (momentum * buf["var"] + (1 - momentum) * cache[3]).astype(self.dtype)

    def apply_semi_orthogonal(self, nu=0.125):
        for spec, p in zip(self.layers, self.params):
            if spec.kind == "tdnnf":
                p["M"] = semi_orthogonal_step(p["M"], nu)

    # serialisation ----------------------------------------------------

    def save(self, path_or_file):
        from .egsio import write_matrix_ark

        def dump(f):
            head = [MODEL_MAGIC, f"context {self.context[0]} {self.context[1]}",
                    f"xent {0 if self.xent_params is None else len(self.xent_params['b'])}",
                    f"layers {len(self.layers)}"]
            head += ["layer " + s.to_text() for s in self.layers]
            recs = [(name, v) for name, v in self.param_items()]
            recs += [(f"{i}.{k}", b[k]) for i, b in enumerate(self.buffers) for k in sorted(b)]
            head.append(f"blobs {len(recs)}")
            f.write(("\n".join(head) + "\n").encode())
            write_matrix_ark(((name, np.atleast_2d(v)) for name, v in recs), f)

        if hasattr(path_or_file, "write"):
            dump(path_or_file)
        else:
            with open(path_or_file, "wb") as f:
                dump(f)

    @classmethod
    def load(cls, path_or_file):
        from .egsio import read_matrix_ark

        if hasattr(path_or_file, "read"):
            data = path_or_file.read()
        else:
            with open(path_or_file, "rb") as f:
                data = f.read()
        buf = io.BytesIO(data)

        def line():
            return buf.readline().decode().split()

        if line() != [MODEL_MAGIC]:
            raise ValueError(f"not a model file (missing {MODEL_MAGIC})")
        ctx = line()
        xdim = int(line()[1])
        n = int(line()[1])
        layers = [LayerSpec.from_text(" ".join(line()[1:])) for _ in range(n)]
        nblobs = int(line()[1])
        blobs = dict(read_matrix_ark(buf))
        if len(blobs) != nblobs:
            raise ValueError("model file has wrong number of parameter blobs")
        params = [{} for _ in layers]
        buffers = [{} for _ in layers]
        xent = {} if xdim else None
        for name, m in blobs.items():
            owner, key = name.split(".")
            v = m[0] if key in ("b", "gamma", "beta", "mean", "var") else m
            if owner == "xent":
                xent[key] = v
            elif key in ("mean", "var"):
                buffers[int(owner)][key] = v
            else:
                params[int(owner)][key] = v
        net = cls(layers, params, buffers, xent)
        if list(net.context) != [int(ctx[1]), int(ctx[2])]:
            raise ValueError("stored context disagrees with layer specs")
        return net


def forward(net: Network, x, training=True) -> ForwardResult:
    return net.forward(x, training)


def backward(net: Network, fwd: ForwardResult, grad_out, grad_xent=None) -> BackwardResult:
    return net.backward(fwd, grad_out, grad_xent)


def build_tdnn(feat_dim, num_pdfs, hidden=(625,) * 7, offsets=None, bottleneck=None,
               subsample_at=None, stride=3, batchnorm=True, xent=False, seed=0):
    """Convenience builder: ``len(hidden)`` TDNN (or TDNN-F when ``bottleneck``
    is set) blocks of splice -> relu -> batchnorm, then an affine output layer.

    ``subsample_at`` inserts a subsample layer of ``stride`` before that block.
    """
    if offsets is None:
        offsets = [(-1, 0, 1)] * len(hidden)
    layers = []
    d = feat_dim
    for i, (h, off) in enumerate(zip(hidden, offsets)):
        if subsample_at == i:
            layers.append(LayerSpec("subsample", d, d, stride=stride))
        if bottleneck and i > 0:
            layers.append(LayerSpec("tdnnf", d, h, off, bottleneck=bottleneck))
        else:
            layers.append(LayerSpec("tdnn", d, h, off))
        layers.append(LayerSpec("relu", h, h))
        if batchnorm:
            layers.append(LayerSpec("batchnorm", h, h))
        d = h
    layers.append(LayerSpec("affine", d, num_pdfs))
    return Network(layers, seed=seed, xent_dim=num_pdfs if xent else None)


def quadratic_loss(target):
    """``0.5 * ||Y - target||^2`` as a ``loss(Y) -> (value, dY)`` callable."""
    target = np.asarray(target, dtype=np.float64)

    def loss(y):
        d = np.asarray(y, dtype=np.float64) - target.reshape(np.shape(y))
        return 0.5 * float(np.sum(d * d)), d

    return loss


def grad_check_net(net: Network, x, loss, eps=1e-4) -> float:
    """Compare backprop gradients against central differences over every parameter.

    Analytic gradients are taken from ``net`` in its own precision; the
    finite differences run on a float64 copy.  The error for each parameter
    tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``
    and the worst tensor is returned.  ``loss(Y)`` returns ``(value, dY)``;
    for networks with a xent head it is called as ``loss(Y, Yx)`` and returns
    ``(value, dY, dYx)``.
    """
    if net.num_params() > 10_000:
        raise ValueError("grad check limited to 1e4 parameters")
    has_x = net.xent_params is not None

    def evaluate(n):
        f = n.forward(x, training=True)
        return f, (loss(f.output, f.xent_output) if has_x else loss(f.output))

    fwd, res = evaluate(net)
    bwd = net.backward(fwd, res[1], res[2] if has_x else None)
    analytic = {f"{i}.{k}": v for i, g in enumerate(bwd.grads) for k, v in g.items()}
    if has_x:
        analytic.update({f"xent.{k}": v for k, v in bwd.xent_grads.items()})

    net64 = net.astype(np.float64)
    worst = 0.0
    for name, p in net64.param_items():
        num = np.zeros(p.shape)
        for idx in np.ndindex(*p.shape):
            orig = p[idx]
            p[idx] = orig + eps
            fp = evaluate(net64)[1][0]
            p[idx] = orig - eps
            fm = evaluate(net64)[1][0]
            p[idx] = orig
            num[idx] = (fp - fm) / (2 * eps)
        a = analytic[name].astype(np.float64)
        scale = max(np.abs(a).max(), np.abs(num).max(), 1e-8)
        worst = max(worst, float(np.abs(a - num).max() / scale))
    return worst
