"""Indirect specular light field: fixed anisotropic spherical Gaussian lobes whose
radiometric parameters are predicted per surface point by a small MLP.

The MLP is plain numpy with a hand-written backward pass.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

N_LOBES = 33
SHARPNESS_CAP = 50.0
PE_FREQS = 6
IDE_DEGREE = 4


@dataclass(frozen=True)
class LobeBank:
    axis: np.ndarray  # (33, 3) lobe centers
    tangent: np.ndarray  # (33, 3) lambda axis
    bitangent: np.ndarray  # (33, 3) mu axis


def build_lobe_bank() -> LobeBank:
    dirs = [np.array([0.0, 0.0, 1.0])]
    for ring in range(1, 5):
        theta = ring * np.pi / 8
        for k in range(8):
            phi = 2 * np.pi * k / 8
            dirs.append(np.array([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)]))
    axis = np.stack(dirs)
    z = np.array([0.0, 0.0, 1.0])
    tangent = np.cross(z, axis)
    norms = np.linalg.norm(tangent, axis=1, keepdims=True)
    tangent = np.where(norms > 1e-9, tangent / np.where(norms > 1e-9, norms, 1.0), np.array([1.0, 0.0, 0.0]))
    bitangent = np.cross(axis, tangent)
    return LobeBank(axis, tangent, bitangent)


def asg_eval(bank: LobeBank, amp, lam, mu, w):
    """Sum of clamped ASG lobes. amp (N, 33, 3), lam/mu (N, 33), w (N, 3) in tangent space."""
    cos = w @ bank.axis.T
    dl = w @ bank.tangent.T
    dm = w @ bank.bitangent.T
    lobe = np.maximum(cos, 0.0) * np.exp(-lam * dl * dl - mu * dm * dm)
    return np.einsum("nj,njc->nc", lobe, amp)


def asg_backward(bank: LobeBank, amp, lam, mu, w, grad_out):
    """Gradients of asg_eval w.r.t. (amp, lam, mu)."""
    cos = w @ bank.axis.T
    dl2 = (w @ bank.tangent.T) ** 2
    dm2 = (w @ bank.bitangent.T) ** 2
    lobe = np.maximum(cos, 0.0) * np.exp(-lam * dl2 - mu * dm2)
    g_amp = lobe[..., None] * grad_out[:, None, :]
    g_lobe = np.einsum("njc,nc->nj", amp, grad_out)
    return g_amp, -g_lobe * lobe * dl2, -g_lobe * lobe * dm2


def rotation_to_normal(n):
    """Minimal rotations taking +z to each normal, shape (N, 3, 3)."""
    n = np.asarray(n, dtype=np.float64)
    c = n[:, 2]
    v = np.stack([-n[:, 1], n[:, 0], np.zeros_like(c)], axis=-1)  # z x n
    vx = np.zeros(n.shape[:1] + (3, 3))
    vx[:, 0, 1], vx[:, 0, 2] = -v[:, 2], v[:, 1]
    vx[:, 1, 0], vx[:, 1, 2] = v[:, 2], -v[:, 0]
    vx[:, 2, 0], vx[:, 2, 1] = -v[:, 1], v[:, 0]
    flipped = c < -1.0 + 1e-9
    k = 1.0 / np.where(flipped, 1.0, 1.0 + c)
    rot = np.eye(3) + vx + (vx @ vx) * k[:, None, None]
    rot[flipped] = np.diag([1.0, -1.0, -1.0])
    return rot


def to_tangent_space(n, w):
    rot = rotation_to_normal(n)
    return np.einsum("nji,nj->ni", rot, w)


# --- encodings ------------------------------------------------------------------

def positional_encoding(p, freqs: int = PE_FREQS):
    p = np.asarray(p, dtype=np.float64)
    scales = (2.0 ** np.arange(freqs)) * np.pi
    arg = p[..., :, None] * scales  # (..., 3, F)
    feats = np.concatenate([np.sin(arg), np.cos(arg)], axis=-1).reshape(p.shape[:-1] + (-1,))
    return np.concatenate([feats, p], axis=-1)


def _generalized_binomial(a, k):
    return np.prod(a - np.arange(k)) / math.factorial(k)


def _sh_coeff(l, m, k):
    legendre = ((-1) ** m * 2 ** l * math.factorial(l) / math.factorial(k) / math.factorial(l - k - m)
                * _generalized_binomial(0.5 * (l + k + m - 1.0), l))
    return math.sqrt((2.0 * l + 1.0) * math.factorial(l - m) / (4.0 * math.pi * math.factorial(l + m))) * legendre


def ide_bands(degree: int = IDE_DEGREE) -> list[tuple[int, int]]:
    return [(2 ** i, m) for i in range(degree) for m in range(2 ** i + 1)]


def _ide_tables(degree):
    bands = ide_bands(degree)
    lmax = 2 ** (degree - 1)
    coeffs = np.zeros((lmax + 1, len(bands)))
    for col, (l, m) in enumerate(bands):
        for k in range(l - m + 1):
            coeffs[k, col] = _sh_coeff(l, m, k)
    return bands, coeffs


_IDE_CACHE: dict[int, tuple] = {}


def ide_attenuation(roughness, degree: int = IDE_DEGREE):
    """Per-band attenuation exp(-sigma l(l+1)/2) with sigma = 1/kappa = r**4 / 2."""
    r = np.clip(np.asarray(roughness, dtype=np.float64), 1e-3, 1.0)
    bands = ide_bands(degree)
    ls = np.array([l for l, _ in bands], dtype=np.float64)
    sigma = 0.5 * r ** 4
    return np.exp(-0.5 * sigma[..., None] * ls * (ls + 1.0))


def sph_harm_complex(w, degree: int = IDE_DEGREE):
    """Complex SH values for the IDE band set, shape (..., n_bands)."""
    if degree not in _IDE_CACHE:
        _IDE_CACHE[degree] = _ide_tables(degree)
    bands, coeffs = _IDE_CACHE[degree]
    w = np.asarray(w, dtype=np.float64)
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    ms = np.array([m for _, m in bands])
    xy = (x + 1j * y)[..., None] ** ms
    zpow = z[..., None] ** np.arange(coeffs.shape[0])
    return xy * (zpow @ coeffs)


def integrated_directional_encoding(w, roughness, degree: int = IDE_DEGREE):
    """Roughness-attenuated SH encoding: real and imaginary parts concatenated."""
    y = sph_harm_complex(w, degree) * ide_attenuation(roughness, degree)
    return np.concatenate([y.real, y.imag], axis=-1)


# --- predictor ----------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def feature_dim() -> int:
    return 3 * 2 * PE_FREQS + 3 + 2 * len(ide_bands()) + 1 + 3


def encode_inputs(p, w_r, roughness, c_res):
    r = np.asarray(roughness, dtype=np.float64).reshape(-1, 1)
    return np.concatenate(
        [positional_encoding(p), integrated_directional_encoding(w_r, r[:, 0]), r, np.asarray(c_res, dtype=np.float64)],
        axis=-1,
    )


class PredictorNet:
    """Fully connected ReLU network mapping encoded inputs to 33 x (3 + 1 + 1) raw values."""

    def __init__(self, in_dim: int | None = None, hidden: int = 128, depth: int = 3, seed: int = 0,
                 out_dim: int = N_LOBES * 5, zero_last: bool = True):
        in_dim = feature_dim() if in_dim is None else in_dim
        rng = np.random.default_rng(seed)
        sizes = [in_dim] + [hidden] * depth + [out_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if zero_last and i == len(sizes) - 2:
                w = np.zeros((a, b))
            else:
                bound = math.sqrt(6.0 / a)
                w = rng.uniform(-bound, bound, size=(a, b))
            self.weights.append(w)
            self.biases.append(np.zeros(b))
        self._cache = None

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def forward(self, x):
        acts = [x]
        pre = []
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            pre.append(z)
            h = np.maximum(z, 0.0) if i < len(self.weights) - 1 else z
            acts.append(h)
        self._cache = (acts, pre)
        return h

    def backward(self, grad_out):
        """Returns (parameter gradients aligned with ``params``, input gradient)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, pre = self._cache
        g = grad_out
        grads: list[np.ndarray] = []
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (pre[i] > 0)
            grads.append(g.sum(axis=0))
            grads.append(acts[i].T @ g)
            g = g @ self.weights[i].T
        grads.reverse()
        return grads, g

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as fh:
            fh.write(b"IASG")
            fh.write(struct.pack("<I", len(self.weights)))
            for w in self.weights:
                fh.write(struct.pack("<II", *w.shape))
            for w, b in zip(self.weights, self.biases):
                fh.write(w.astype("<f4").tobytes())
                fh.write(b.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "PredictorNet":
        raw = Path(path).read_bytes()
        if raw[:4] != b"IASG":
            raise ValueError(f"{path}: not a predictor checkpoint")
        (n,) = struct.unpack("<I", raw[4:8])
        shapes = [struct.unpack("<II", raw[8 + 8 * i:16 + 8 * i]) for i in range(n)]
        off = 8 + 8 * n
        net = cls.__new__(cls)
        net.weights, net.biases, net._cache = [], [], None
        for a, b in shapes:
            net.weights.append(np.frombuffer(raw, "<f4", a * b, off).reshape(a, b).astype(np.float64))
            off += 4 * a * b
            net.biases.append(np.frombuffer(raw, "<f4", b, off).astype(np.float64))
            off += 4 * b
        return net


def params_from_raw(raw):
    """Map raw outputs (N, 165) to amplitudes (N, 33, 3) and sharpness (N, 33) x 2."""
    raw = raw.reshape(-1, N_LOBES, 5)
    amp = softplus(raw[..., :3])
    sp = softplus(raw[..., 3:])
    sharp = SHARPNESS_CAP * np.tanh(sp / SHARPNESS_CAP)
    return amp, sharp[..., 0], sharp[..., 1]


def params_backward(raw, g_amp, g_lam, g_mu):
    raw = raw.reshape(-1, N_LOBES, 5)
    out = np.empty_like(raw)
    out[..., :3] = g_amp * sigmoid(raw[..., :3])
    sp = softplus(raw[..., 3:])
    dsharp = (1.0 - np.tanh(sp / SHARPNESS_CAP) ** 2) * sigmoid(raw[..., 3:])
    out[..., 3] = g_lam * dsharp[..., 0]
    out[..., 4] = g_mu * dsharp[..., 1]
    return out.reshape(raw.shape[0], -1)


def predict_lobe_params(net: PredictorNet, p, w_r, roughness, c_res):
    raw = net.forward(encode_inputs(p, w_r, roughness, c_res))
    return params_from_raw(raw)


class IndiAsg:
    """Predictor plus lobe bank: evaluates indirect radiance and backpropagates into the net."""

    def __init__(self, seed: int = 0, hidden: int = 128, depth: int = 3):
        self.bank = build_lobe_bank()
        self.net = PredictorNet(hidden=hidden, depth=depth, seed=seed)
        self._cache = None

    def forward(self, p, normal, w_r, roughness, c_res):
        raw = self.net.forward(encode_inputs(p, w_r, roughness, c_res))
        amp, lam, mu = params_from_raw(raw)
        w_t = to_tangent_space(normal, w_r)
        out = asg_eval(self.bank, amp, lam, mu, w_t)
        self._cache = (raw, amp, lam, mu, w_t)
        return out

    def backward(self, grad_out):
        raw, amp, lam, mu, w_t = self._cache
        g_amp, g_lam, g_mu = asg_backward(self.bank, amp, lam, mu, w_t, grad_out)
        grads, _ = self.net.backward(params_backward(raw, g_amp, g_lam, g_mu))
        return grads
