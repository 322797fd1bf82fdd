"""The pilot-aware power-control transformer and the fully connected baseline.

Both networks are written over :mod:`papc.autodiff` nodes and accept a batch of
fading matrices ``B`` of shape ``(b, M, K)`` with pilot grams ``phi`` of shape
``(b, K, K)``. Users are rows inside the transformer; there is no positional
encoding and all layer norms use statistics over the whole matrix, so the
transformer is equivariant to relabelling users.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import se as se_core
from .config import ModelHyper
from .errors import DataError
from .serialization import checkpoint_from_bytes, checkpoint_to_bytes

KINDS = {"papc": 0, "fcn": 1}
PROJECTIONS = ("scale", "identity", "none")


def papc_shapes(h: ModelHyper) -> list[tuple[str, tuple[int, int]]]:
    M, Mb, D = h.M, h.M_bar, h.D
    shapes = [
        ("pre.ln1.alpha", (1, M)), ("pre.ln1.beta", (1, M)),
        ("pre.W", (M, Mb)), ("pre.b", (1, Mb)),
        ("pre.ln2.alpha", (1, Mb)), ("pre.ln2.beta", (1, Mb)),
    ]
    for l in range(h.L):
        p = f"block{l}"
        for j in range(h.H):
            for t in ("Q", "K", "V"):
                shapes += [(f"{p}.head{j}.W{t}", (Mb, D)), (f"{p}.head{j}.b{t}", (1, D))]
        shapes += [
            (f"{p}.WO", (Mb, Mb)), (f"{p}.bO", (1, Mb)),
            (f"{p}.ln1.alpha", (1, Mb)), (f"{p}.ln1.beta", (1, Mb)),
            (f"{p}.ln2.alpha", (1, Mb)), (f"{p}.ln2.beta", (1, Mb)),
            (f"{p}.W1", (Mb, Mb)), (f"{p}.b1", (1, Mb)),
            (f"{p}.W2", (Mb, Mb)), (f"{p}.b2", (1, Mb)),
        ]
    shapes += [
        ("post.W", (Mb, M)), ("post.b", (1, M)),
        ("post.ln.alpha", (1, M)), ("post.ln.beta", (1, M)),
    ]
    return shapes


def fcn_shapes(h: ModelHyper, K: int) -> list[tuple[str, tuple[int, int]]]:
    M, Mh = h.M, h.M_hat
    MK = M * K
    return [
        ("in.ln.alpha", (1, MK)), ("in.ln.beta", (1, MK)),
        ("fc1.W", (MK, Mh)), ("fc1.b", (1, Mh)),
        ("ln1.alpha", (1, Mh)), ("ln1.beta", (1, Mh)),
        ("fc2.W", (Mh, Mh)), ("fc2.b", (1, Mh)),
        ("ln2.alpha", (1, Mh)), ("ln2.beta", (1, Mh)),
        ("fc3.W", (Mh, MK)), ("fc3.b", (1, MK)),
        ("post.ln.alpha", (1, M)), ("post.ln.beta", (1, M)),
    ]


def count(shapes) -> int:
    return sum(r * c for _, (r, c) in shapes)


def matched_fcn_width(h: ModelHyper, K: int) -> int:
    """Hidden width whose FCN parameter count is closest to the transformer's."""
    target = count(papc_shapes(h))
    MK = h.M * K
    # count(Mh) = Mh^2 + (2 MK + 6) Mh + 3 MK + 2 M
    b = 2 * MK + 6
    c = 3 * MK + 2 * h.M - target
    root = (-b + math.sqrt(b * b - 4 * c)) / 2
    best = max(1, int(round(root)))
    candidates = [w for w in (best - 1, best, best + 1) if w > 0]
    return min(candidates, key=lambda w: abs(count(fcn_shapes(h.replace(M_hat=w), K)) - target))


def init_params(shapes, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Linear maps ~ U(+-1/sqrt(fan_in)); layer norms start at alpha=1, beta=0."""
    fan_in: dict[str, int] = {}
    for name, (r, _) in shapes:
        if name.rsplit(".", 1)[-1].startswith("W"):
            fan_in[name.rsplit(".", 1)[0] + "." + name.rsplit(".", 1)[-1][1:]] = r
    params = {}
    for name, shp in shapes:
        prefix, leaf = name.rsplit(".", 1)
        if leaf == "alpha":
            params[name] = np.ones(shp)
        elif leaf == "beta":
            params[name] = np.zeros(shp)
        elif leaf.startswith("W"):
            bound = 1.0 / math.sqrt(shp[0])
            params[name] = rng.uniform(-bound, bound, size=shp)
        else:
            bound = 1.0 / math.sqrt(fan_in[prefix + "." + leaf[1:]])
            params[name] = rng.uniform(-bound, bound, size=shp)
    return params


def layer_norm(C: ad.Node, alpha: ad.Node, beta: ad.Node, eps: float) -> ad.Node:
    return ad.add(ad.mul(ad.standardize(C, eps), alpha), beta)


def linear(X: ad.Node, W: ad.Node, b: ad.Node) -> ad.Node:
    return ad.add(X @ W, b)


def preprocess(tape, P, B, h: ModelHyper) -> ad.Node:
    B = np.asarray(B, dtype=float)
    if np.any(B <= 0):
        raise DataError("fading entries must be positive before the logarithm")
    x = tape.constant(np.log(np.swapaxes(B, -1, -2)))
    x = layer_norm(x, P["pre.ln1.alpha"], P["pre.ln1.beta"], h.ln_eps)
    x = linear(x, P["pre.W"], P["pre.b"])
    return layer_norm(x, P["pre.ln2.alpha"], P["pre.ln2.beta"], h.ln_eps)


def mmha(tape, P, X: ad.Node, phi, h: ModelHyper, prefix: str, trace=None) -> ad.Node:
    """Heads score with QK^T / sqrt(D); scores are multiplied (not -inf masked) by phi."""
    mask = tape.constant(phi)
    inv = 1.0 / math.sqrt(h.D)
    heads = []
    for j in range(h.H):
        p = f"{prefix}.head{j}"
        Q = linear(X, P[p + ".WQ"], P[p + ".bQ"])
        Kt = linear(X, P[p + ".WK"], P[p + ".bK"])
        V = linear(X, P[p + ".WV"], P[p + ".bV"])
        S = ad.mul(ad.scale(Q @ ad.transpose(Kt), inv), mask)
        A = ad.softmax_rows(S)
        if trace is not None:
            trace.setdefault("attention", []).append(A.value)
        heads.append(A @ V)
    Y = ad.concat_cols(heads)
    return linear(Y, P[prefix + ".WO"], P[prefix + ".bO"])


def papc_block(tape, P, X: ad.Node, phi, h: ModelHyper, prefix: str, trace=None) -> ad.Node:
    Y = mmha(tape, P, X, phi, h, prefix, trace)
    Yb = layer_norm(ad.add(X, Y), P[prefix + ".ln1.alpha"], P[prefix + ".ln1.beta"], h.ln_eps)
    F = linear(ad.relu(linear(Yb, P[prefix + ".W1"], P[prefix + ".b1"])), P[prefix + ".W2"], P[prefix + ".b2"])
    return layer_norm(ad.add(Yb, F), P[prefix + ".ln2.alpha"], P[prefix + ".ln2.beta"], h.ln_eps)


def _squash(x: ad.Node, offset: float) -> ad.Node:
    return ad.exp(ad.neg(ad.relu(ad.shift(x, offset))))


def _project(Mt: ad.Node, N: int, projection: str) -> ad.Node:
    if projection == "none":
        return Mt
    if projection not in PROJECTIONS:
        raise ValueError(f"projection must be one of {PROJECTIONS}")
    # entries are already >= 0, so only the per-BS norm scaling is active
    return ad.ball_scale_rows(Mt, 1.0 / math.sqrt(N), straight_through=projection == "identity")


def postprocess(tape, P, Z: ad.Node, phi, h: ModelHyper, N: int, projection="scale", trace=None) -> ad.Node:
    Mh = linear(Z, P["post.W"], P["post.b"])
    Mb = layer_norm(Mh, P["post.ln.alpha"], P["post.ln.beta"], h.ln_eps)
    Mt = _squash(ad.transpose(Mb), h.offset)
    if trace is not None:
        trace["squashed"] = Mt
    diag = np.diagonal(phi, axis1=-2, axis2=-1)[..., None, :]  # (..., 1, K): diag(phi) as a row
    return _project(ad.mul(Mt, tape.constant(diag)), N, projection)


def papc_forward(tape, P, B, phi, h: ModelHyper, N: int, projection="scale", trace=None) -> ad.Node:
    Z = preprocess(tape, P, B, h)
    for l in range(h.L):
        Z = papc_block(tape, P, Z, phi, h, f"block{l}", trace)
    return postprocess(tape, P, Z, phi, h, N, projection, trace)


def fcn_forward(tape, P, B, h: ModelHyper, N: int, K: int, projection="scale", trace=None) -> ad.Node:
    B = np.asarray(B, dtype=float)
    if B.shape[-1] != K:
        raise DataError(f"FCN was built for K={K} users, got input with K={B.shape[-1]}")
    if np.any(B <= 0):
        raise DataError("fading entries must be positive before the logarithm")
    M = h.M
    lead = B.shape[:-2]
    x = tape.constant(np.log(B).reshape(*lead, 1, M * K))
    x = layer_norm(x, P["in.ln.alpha"], P["in.ln.beta"], h.ln_eps)
    x = ad.relu(layer_norm(linear(x, P["fc1.W"], P["fc1.b"]), P["ln1.alpha"], P["ln1.beta"], h.ln_eps))
    x = ad.relu(layer_norm(linear(x, P["fc2.W"], P["fc2.b"]), P["ln2.alpha"], P["ln2.beta"], h.ln_eps))
    x = linear(x, P["fc3.W"], P["fc3.b"])
    x = ad.reshape(x, (*lead, K, M))
    x = layer_norm(x, P["post.ln.alpha"], P["post.ln.beta"], h.ln_eps)
    Mt = _squash(ad.transpose(x), h.offset)
    if trace is not None:
        trace["squashed"] = Mt
    return _project(Mt, N, projection)


@dataclass
class Model:
    kind: str
    hyper: ModelHyper
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, kind: str, hyper: ModelHyper, seed: int = 0) -> "Model":
        if kind not in KINDS:
            raise ValueError(f"model kind must be one of {sorted(KINDS)}")
        if kind == "fcn" and hyper.M_hat is None:
            hyper = hyper.replace(M_hat=matched_fcn_width(hyper, hyper.K_max))
        model = cls(kind, hyper)
        model.params = init_params(model.shapes(), np.random.default_rng(seed))
        return model

    @property
    def K(self) -> int:
        return self.hyper.K_max

    def shapes(self):
        if self.kind == "papc":
            return papc_shapes(self.hyper)
        return fcn_shapes(self.hyper, self.K)

    def n_params(self) -> int:
        return count(self.shapes())

    def bind(self, tape, trainable=True) -> dict[str, ad.Node]:
        make = tape.leaf if trainable else tape.constant
        return {name: make(self.params[name], name=name) for name, _ in self.shapes()}

    def forward(self, tape, nodes, B, phi, N: int, projection="scale", trace=None) -> ad.Node:
        if self.kind == "papc":
            return papc_forward(tape, nodes, B, phi, self.hyper, N, projection, trace)
        return fcn_forward(tape, nodes, B, self.hyper, N, self.K, projection, trace)

    def predict(self, B, phi, N: int, trace=None) -> np.ndarray:
        """Power matrices in S for a batch (or a single sample)."""
        B = np.asarray(B, dtype=float)
        single = B.ndim == 2
        if single:
            B, phi = B[None], np.asarray(phi)[None]
        tape = ad.Tape()
        out = self.forward(tape, self.bind(tape, trainable=False), B, phi, N, "scale", trace)
        Mu = se_core.project_S(out.value, N)
        return Mu[0] if single else Mu

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n, _ in self.shapes()])

    def header(self) -> tuple[int, ...]:
        h = self.hyper
        if self.kind == "papc":
            return (h.M, h.K_max, h.M_bar, h.H, h.L, h.d_mod)
        return (h.M, h.K_max, h.M_hat, 0, 0, h.d_mod)

    def to_bytes(self) -> bytes:
        return checkpoint_to_bytes(KINDS[self.kind], self.header(), [self.params[n] for n, _ in self.shapes()])

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Model":
        kind_id, (M, K, width, H, L, d_mod), flat = checkpoint_from_bytes(buf)
        if kind_id == 0:
            hyper = ModelHyper(M=M, K_max=K, M_bar=width, H=H, L=L, d_mod=d_mod)
            model = cls("papc", hyper)
        else:
            hyper = ModelHyper(M=M, K_max=K, M_hat=width, d_mod=d_mod, M_bar=5 * (M // 5 + 1))
            model = cls("fcn", hyper)
        shapes = model.shapes()
        if flat.size != count(shapes):
            raise DataError(f"checkpoint holds {flat.size} values, model needs {count(shapes)}")
        pos = 0
        for name, (r, c) in shapes:
            model.params[name] = flat[pos:pos + r * c].reshape(r, c).copy()
            pos += r * c
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(buf)
