"""
Two-level pyramidal probabilistic matcher with a hand-written backward pass.

Level 0 works at 1/8 resolution with a global correlation volume, level 1 at
1/4 with a local one around the upsampled level-0 flow. Each level predicts a
mean flow and the raw parameters of a constrained Laplace mixture; the
correlation uncertainty module looks at every correlation slice on its own.
Feature filters are frozen random convolutions; every other weight is learned.

Arrays are batched as (N, H, W, C). Flows at a level are expressed in that
level's pixel units.
"""

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import FormatError, ShapeMismatch
from .geometry import FlowField, bilinear_sample
from .mixture import ConstraintSpec, MixtureParams, nll, nll_gradient

logger = logging.getLogger(__name__)

STRIDES = (8, 4)
CHECKPOINT_MAGIC = b'PDCW'
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelArchitecture:
    """Sizes that fix the parameter layout"""

    image_height: int = 64
    image_width: int = 64
    feature_channels: int = 16
    flow_widths: Tuple[int, int] = (64, 32)
    cum_hidden: int = 8
    cum_out: int = 8
    predictor_widths: Tuple[int, int] = (32, 16)
    search_radius: int = 4
    temperature: float = 15.0
    num_components: int = 2

    def __post_init__(self):
        object.__setattr__(self, 'flow_widths', tuple(self.flow_widths))
        object.__setattr__(self, 'predictor_widths', tuple(self.predictor_widths))
        if self.image_height % 8 or self.image_width % 8:
            raise ShapeMismatch(
                f"image size {self.image_width}x{self.image_height} must be divisible by 8"
            )

    @classmethod
    def from_config(cls, config, num_components: int) -> 'ModelArchitecture':
        return cls(
            image_height=config.image_height,
            image_width=config.image_width,
            feature_channels=config.feature_channels,
            flow_widths=config.flow_widths,
            cum_hidden=config.cum_hidden,
            cum_out=config.cum_out,
            predictor_widths=config.predictor_widths,
            search_radius=config.search_radius,
            temperature=config.softargmax_temperature,
            num_components=num_components,
        )

    def grid(self, level: int) -> Tuple[int, int]:
        stride = STRIDES[level]
        return self.image_height // stride, self.image_width // stride

    @property
    def displacements(self) -> int:
        return (2 * self.search_radius + 1) ** 2

    def to_dict(self) -> dict:
        data = asdict(self)
        data['flow_widths'] = list(self.flow_widths)
        data['predictor_widths'] = list(self.predictor_widths)
        return data

    def digest(self) -> str:
        return hashlib.md5(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# primitives

def conv2d_forward(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], pad: int):
    """Cross-correlation of x (N,H,W,Ci) with w (kh,kw,Ci,Co); returns (out, cols)"""
    kh, kw = w.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    n, height, width, _ = x.shape
    out_h, out_w = height - kh + 1, width - kw + 1
    cols = np.empty((n, out_h, out_w, kh, kw, x.shape[-1]))
    for dy in range(kh):
        for dx in range(kw):
            cols[:, :, :, dy, dx, :] = x[:, dy:dy + out_h, dx:dx + out_w, :]
    out = np.tensordot(cols, w, axes=([3, 4, 5], [0, 1, 2]))
    if b is not None:
        out += b
    return out, cols


def conv2d_backward(dout: np.ndarray, cols: np.ndarray, w: np.ndarray, in_shape, pad: int,
                    need_input: bool = True):
    """Gradients (dx, dw, db) of conv2d_forward given dL/dout"""
    dw = np.tensordot(cols, dout, axes=([0, 1, 2], [0, 1, 2]))
    db = dout.sum(axis=(0, 1, 2))
    if not need_input:
        return None, dw, db
    kh, kw = w.shape[:2]
    n, height, width, channels = in_shape
    out_h, out_w = dout.shape[1:3]
    dcols = np.tensordot(dout, w, axes=([3], [3]))
    dxp = np.zeros((n, height + 2 * pad, width + 2 * pad, channels))
    for dy in range(kh):
        for dx in range(kw):
            dxp[:, dy:dy + out_h, dx:dx + out_w, :] += dcols[:, :, :, dy, dx, :]
    return dxp[:, pad:pad + height, pad:pad + width, :], dw, db


def upsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """Bilinear interpolation matrix (n_in * factor, n_in), half-pixel aligned"""
    n_out = n_in * factor
    matrix = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n_in - 1.0)
        i0 = int(np.floor(src))
        frac = src - i0
        i1 = min(i0 + 1, n_in - 1)
        matrix[i, i0] += 1.0 - frac
        matrix[i, i1] += frac
    return matrix


def upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Separable bilinear upsampling of (N,h,w,C)"""
    uy = upsample_matrix(x.shape[1], factor)
    ux = upsample_matrix(x.shape[2], factor)
    return np.einsum('ia,jb,nabc->nijc', uy, ux, x)


def upsample_backward(dout: np.ndarray, factor: int) -> np.ndarray:
    uy = upsample_matrix(dout.shape[1] // factor, factor)
    ux = upsample_matrix(dout.shape[2] // factor, factor)
    return np.einsum('ia,jb,nijc->nabc', uy, ux, dout)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def displacement_grid(radius: int) -> np.ndarray:
    """(K, 2) displacements (dx, dy), dy-major raster order"""
    steps = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(steps, steps, indexing='ij')
    return np.stack([dx.ravel(), dy.ravel()], axis=-1).astype(np.float64)


# ---------------------------------------------------------------------------
# weights

class ConvStack:
    """Sequence of convolutions sharing a parameter prefix"""

    def __init__(self, prefix: str, pads: Sequence[int], activations: Sequence[bool]):
        self.prefix = prefix
        self.pads = list(pads)
        self.activations = list(activations)

    def __len__(self):
        return len(self.pads)

    def names(self, i: int) -> Tuple[str, str]:
        return f'{self.prefix}.w{i}', f'{self.prefix}.b{i}'

    def forward(self, x: np.ndarray, params: Dict[str, np.ndarray]):
        outputs, caches = [], []
        for i in range(len(self)):
            w_name, b_name = self.names(i)
            out, cols = conv2d_forward(x, params[w_name], params[b_name], self.pads[i])
            if self.activations[i]:
                out = np.tanh(out)
            caches.append((cols, x.shape))
            outputs.append(out)
            x = out
        return outputs, caches

    def backward(self, dout, params, outputs, caches, grads, start: Optional[int] = None,
                 stop: int = 0, need_input: bool = True):
        """Back-propagate from the output of layer ``start`` down to the input of layer ``stop``"""
        start = len(self) - 1 if start is None else start
        for i in range(start, stop - 1, -1):
            if self.activations[i]:
                dout = dout * (1.0 - outputs[i] ** 2)
            w_name, b_name = self.names(i)
            cols, in_shape = caches[i]
            want_input = need_input or i > stop
            dout, dw, db = conv2d_backward(dout, cols, params[w_name], in_shape, self.pads[i],
                                           need_input=want_input)
            grads[w_name] += dw
            grads[b_name] += db
        return dout


def cum_layout(slice_shape: Tuple[int, int]) -> List[Tuple[int, int]]:
    """Kernel sizes collapsing a correlation slice to 1x1: valid 3x3 convs, then the remainder"""
    h, w = slice_shape
    kernels = []
    while min(h, w) > 3:
        kernels.append((3, 3))
        h, w = h - 2, w - 2
    kernels.append((h, w))
    return kernels


@dataclass
class ModelWeights:
    """Frozen feature filters plus every learnable tensor, keyed by name"""

    architecture: ModelArchitecture
    constraints: ConstraintSpec
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, architecture: ModelArchitecture, constraints: ConstraintSpec,
                   seed: int = 0) -> 'ModelWeights':
        if constraints.num_components != architecture.num_components:
            raise ShapeMismatch(
                f"architecture expects {architecture.num_components} components, "
                f"constraints define {constraints.num_components}"
            )
        rng = np.random.default_rng([seed, 7])
        weights = cls(architecture=architecture, constraints=constraints)
        for name, shape, scale in weights.layout():
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            if name.split('.')[-1].startswith('b'):
                value = np.zeros(shape)
            else:
                value = rng.normal(0.0, scale / np.sqrt(fan_in), size=shape)
            if name.startswith('feat'):
                weights.frozen[name] = value
            else:
                weights.params[name] = value
        return weights

    def layout(self) -> List[Tuple[str, Tuple[int, ...], float]]:
        """(name, shape, init scale) for every tensor, in checkpoint order"""
        arch = self.architecture
        f = arch.feature_channels
        m = arch.num_components
        c1, c2 = arch.flow_widths
        p1, p2 = arch.predictor_widths
        h0, w0 = arch.grid(0)
        side = 2 * arch.search_radius + 1
        entries = []
        for level in (0, 1):
            entries.append((f'feat{level}.w0', (3, 3, 3, f), 1.0))
            entries.append((f'feat{level}.w1', (3, 3, f, f), 1.0))

        def stack(prefix, in_ch, widths, kernels, last_scale):
            for i, (out_ch, kernel) in enumerate(zip(widths, kernels)):
                scale = last_scale if i == len(widths) - 1 else 1.0
                entries.append((f'{prefix}.w{i}', (kernel[0], kernel[1], in_ch, out_ch), scale))
                entries.append((f'{prefix}.b{i}', (out_ch,), 0.0))
                in_ch = out_ch

        stack('dec0', h0 * w0 + 2, (c1, c2, 2), [(3, 3)] * 3, 0.01)
        kernels0 = cum_layout((h0, w0))
        stack('cum0', 1, [arch.cum_hidden] * (len(kernels0) - 1) + [arch.cum_out], kernels0, 1.0)
        stack('pred0', arch.cum_out + c2, (p1, p2, 2 * m), [(3, 3)] * 3, 0.1)
        stack('dec1', arch.displacements + 2 + 2 * m, (c1, c2, 2), [(3, 3)] * 3, 0.01)
        kernels1 = cum_layout((side, side))
        stack('cum1', 1, [arch.cum_hidden] * (len(kernels1) - 1) + [arch.cum_out], kernels1, 1.0)
        stack('pred1', arch.cum_out + c2 + 2 * m, (p1, p2, 2 * m), [(3, 3)] * 3, 0.1)
        return entries

    def tensor(self, name: str) -> np.ndarray:
        return self.params[name] if name in self.params else self.frozen[name]

    @property
    def learnable_names(self) -> List[str]:
        return list(self.params)

    def copy(self) -> 'ModelWeights':
        return ModelWeights(
            architecture=self.architecture,
            constraints=self.constraints,
            params={k: v.copy() for k, v in self.params.items()},
            frozen={k: v.copy() for k, v in self.frozen.items()},
            metadata=dict(self.metadata),
        )

    def squared_norm(self) -> float:
        return float(sum(np.sum(v ** 2) for v in self.params.values()))

    def architecture_hash(self) -> str:
        payload = {'architecture': self.architecture.to_dict(),
                   'constraints': self.constraints.to_dict()}
        return hashlib.md5(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def save(self, path):
        """Versioned little-endian checkpoint: header, float32 blob, JSON footer"""
        names = [name for name, _, _ in self.layout()]
        blob = np.concatenate([self.tensor(name).ravel() for name in names]).astype('<f4')
        footer = json.dumps({
            'architecture': self.architecture.to_dict(),
            'constraints': self.constraints.to_dict(),
            'tensors': [[name, list(self.tensor(name).shape)] for name in names],
            'frozen': sorted(self.frozen),
            'metadata': self.metadata,
        }, sort_keys=True).encode('utf-8')
        with open(path, 'wb') as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack('<I', CHECKPOINT_VERSION))
            f.write(self.architecture_hash().encode('ascii'))
            f.write(struct.pack('<Q', blob.size))
            f.write(blob.tobytes())
            f.write(struct.pack('<I', len(footer)))
            f.write(footer)

    @classmethod
    def load(cls, path) -> 'ModelWeights':
        with open(path, 'rb') as f:
            data = f.read()
        if data[:4] != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        try:
            version, = struct.unpack_from('<I', data, 4)
            digest = data[8:40].decode('ascii')
            count, = struct.unpack_from('<Q', data, 40)
            blob_end = 48 + 4 * count
            blob = np.frombuffer(data[48:blob_end], dtype='<f4').astype(np.float64)
            footer_len, = struct.unpack_from('<I', data, blob_end)
            footer = json.loads(data[blob_end + 4:blob_end + 4 + footer_len].decode('utf-8'))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: corrupt checkpoint ({e})")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        if blob.size != count:
            raise FormatError(f"{path}: truncated parameter blob")

        weights = cls(
            architecture=ModelArchitecture(**footer['architecture']),
            constraints=ConstraintSpec.from_dict(footer['constraints']),
            metadata=footer.get('metadata', {}),
        )
        if weights.architecture_hash() != digest:
            raise FormatError(f"{path}: architecture hash mismatch")
        frozen = set(footer.get('frozen', []))
        offset = 0
        for name, shape in footer['tensors']:
            size = int(np.prod(shape))
            value = blob[offset:offset + size].reshape(shape)
            offset += size
            (weights.frozen if name in frozen else weights.params)[name] = value
        if offset != count:
            raise FormatError(f"{path}: tensor table does not cover the blob")
        return weights


# ---------------------------------------------------------------------------
# network pieces

def _as_batch(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image[None] if image.ndim == 3 else image


def extract_features(image: np.ndarray, level: int, weights: ModelWeights) -> np.ndarray:
    """Frozen conv -> tanh -> block average -> conv -> tanh, unit-norm channels"""
    x = _as_batch(image) - 0.5
    stride = STRIDES[level]
    n, height, width, _ = x.shape
    if height % stride or width % stride:
        raise ShapeMismatch(f"image {width}x{height} is not divisible by stride {stride}")
    a, _ = conv2d_forward(x, weights.frozen[f'feat{level}.w0'], None, 1)
    a = np.tanh(a)
    pooled = a.reshape(n, height // stride, stride, width // stride, stride, -1).mean(axis=(2, 4))
    b, _ = conv2d_forward(pooled, weights.frozen[f'feat{level}.w1'], None, 1)
    b = np.tanh(b)
    norm = np.linalg.norm(b, axis=-1, keepdims=True)
    return b / np.maximum(norm, 1e-12)


@dataclass
class CorrelationVolume:
    """Similarities per location: global (N,h,w,h,w) or local (N,h,w,(2d+1)^2)"""

    values: np.ndarray
    radius: Optional[int] = None

    @property
    def is_global(self) -> bool:
        return self.radius is None

    @property
    def slices(self) -> np.ndarray:
        """One 2-D slice per location, shape (N,h,w,S1,S2)"""
        if self.is_global:
            return self.values
        side = 2 * self.radius + 1
        return self.values.reshape(self.values.shape[:3] + (side, side))


def correlate(fr: np.ndarray, fq: np.ndarray, mode: str = 'global', radius: int = 4
              ) -> CorrelationVolume:
    """C_ijkl = fr_ij . fq_(i+k)(j+l); local displacements outside the grid read 0"""
    if fr.shape != fq.shape:
        raise ShapeMismatch(f"feature grids differ: {fr.shape} vs {fq.shape}")
    if mode == 'global':
        return CorrelationVolume(np.einsum('nijc,nabc->nijab', fr, fq))
    n, h, w, _ = fr.shape
    padded = np.pad(fq, ((0, 0), (radius, radius), (radius, radius), (0, 0)))
    disp = displacement_grid(radius).astype(int)
    values = np.empty((n, h, w, len(disp)))
    for k, (dx, dy) in enumerate(disp):
        shifted = padded[:, radius + dy:radius + dy + h, radius + dx:radius + dx + w]
        values[..., k] = (fr * shifted).sum(axis=-1)
    return CorrelationVolume(values, radius)


def _local_correlation_backward(d_values: np.ndarray, fr: np.ndarray, radius: int) -> np.ndarray:
    n, h, w, c = fr.shape
    d_padded = np.zeros((n, h + 2 * radius, w + 2 * radius, c))
    for k, (dx, dy) in enumerate(displacement_grid(radius).astype(int)):
        d_padded[:, radius + dy:radius + dy + h, radius + dx:radius + dx + w] += \
            d_values[..., k, None] * fr
    return d_padded[:, radius:radius + h, radius:radius + w]


def _cum_stack(prefix: str, slice_shape: Tuple[int, int]) -> ConvStack:
    depth = len(cum_layout(slice_shape))
    return ConvStack(prefix, [0] * depth, [True] * (depth - 1) + [False])


def correlation_uncertainty_forward(volume: CorrelationVolume, weights: ModelWeights, level: int,
                                    return_cache: bool = False):
    """Per-location uncertainty features u (N,h,w,n) from each correlation slice alone"""
    slices = volume.slices
    n, h, w, s1, s2 = slices.shape
    stack = _cum_stack(f'cum{level}', (s1, s2))
    outputs, caches = stack.forward(slices.reshape(n * h * w, s1, s2, 1), weights.params)
    u = outputs[-1].reshape(n, h, w, -1)
    if return_cache:
        return u, (stack, outputs, caches, (n, h, w))
    return u


def _global_soft_argmax(values: np.ndarray, temperature: float) -> np.ndarray:
    n, h, w = values.shape[:3]
    p = _softmax(temperature * values.reshape(n, h, w, h * w))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ex = p @ xs.ravel()
    ey = p @ ys.ravel()
    return np.stack([ex - xs, ey - ys], axis=-1)


def _local_soft_argmax(values: np.ndarray, radius: int, temperature: float):
    p = _softmax(temperature * values)
    disp = displacement_grid(radius)
    return p @ disp, p


def _local_soft_argmax_backward(d_expect: np.ndarray, p: np.ndarray, expect: np.ndarray,
                                radius: int, temperature: float) -> np.ndarray:
    disp = displacement_grid(radius)
    projected = d_expect @ disp.T - (d_expect * expect).sum(axis=-1, keepdims=True)
    return temperature * p * projected


def _warp_features(features: np.ndarray, flow: np.ndarray):
    """Sample features at x + flow; returns values and per-channel d/dx, d/dy"""
    n, h, w, _ = features.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    warped = np.empty_like(features)
    grad_x = np.empty_like(features)
    grad_y = np.empty_like(features)
    for i in range(n):
        warped[i], _, grad_x[i], grad_y[i] = bilinear_sample(
            features[i], xs + flow[i, ..., 0], ys + flow[i, ..., 1], return_gradients=True)
    return warped, grad_x, grad_y


@dataclass
class LevelPrediction:
    """Mean flow and raw mixture parameters at one pyramid level"""

    level: int
    mu: np.ndarray
    component_logits: np.ndarray
    raw_scales: np.ndarray

    def params(self, constraints: ConstraintSpec) -> MixtureParams:
        return MixtureParams(mu=self.mu, component_logits=self.component_logits,
                             raw_scales=self.raw_scales, constraints=constraints)

    @property
    def stride(self) -> int:
        return STRIDES[self.level]


def _stacks(arch: ModelArchitecture) -> Dict[str, ConvStack]:
    side = 2 * arch.search_radius + 1
    return {
        'dec0': ConvStack('dec0', [1, 1, 1], [True, True, False]),
        'pred0': ConvStack('pred0', [1, 1, 1], [True, True, False]),
        'dec1': ConvStack('dec1', [1, 1, 1], [True, True, False]),
        'pred1': ConvStack('pred1', [1, 1, 1], [True, True, False]),
        'cum0': _cum_stack('cum0', arch.grid(0)),
        'cum1': _cum_stack('cum1', (side, side)),
    }


def forward(query: np.ndarray, reference: np.ndarray, weights: ModelWeights,
            return_cache: bool = False):
    """Predictions for both levels, coarse first.

    Images are (H,W,3) or (N,H,W,3) in [0,1]; predictions are always batched.
    """
    query, reference = _as_batch(query), _as_batch(reference)
    if query.shape != reference.shape:
        raise ShapeMismatch(f"query {query.shape} and reference {reference.shape} differ")
    arch = weights.architecture
    height, width = query.shape[1:3]
    if height % 8 or width % 8:
        raise ShapeMismatch(f"image size {width}x{height} must be divisible by 8")
    if (height, width) != (arch.image_height, arch.image_width):
        raise ShapeMismatch(
            f"weights expect {arch.image_width}x{arch.image_height}, got {width}x{height}"
        )
    p = weights.params
    m = arch.num_components
    radius, tau = arch.search_radius, arch.temperature
    stacks = _stacks(arch)
    n = query.shape[0]
    h0, w0 = arch.grid(0)

    # level 0: global matching
    fr0 = extract_features(reference, 0, weights)
    fq0 = extract_features(query, 0, weights)
    c0 = correlate(fr0, fq0, 'global')
    sa0 = _global_soft_argmax(c0.values, tau)
    in0 = np.concatenate([c0.values.reshape(n, h0, w0, h0 * w0), sa0], axis=-1)
    dec0_out, dec0_cache = stacks['dec0'].forward(in0, p)
    hidden0 = dec0_out[1]
    mu0 = sa0 + dec0_out[2]
    u0, cum0_cache = correlation_uncertainty_forward(c0, weights, 0, return_cache=True)
    pred0_out, pred0_cache = stacks['pred0'].forward(np.concatenate([u0, hidden0], axis=-1), p)
    phi0 = pred0_out[-1]

    # level 1: local matching around the upsampled coarse flow
    up_mu = 2.0 * upsample(mu0, 2)
    up_phi = upsample(phi0, 2)
    fr1 = extract_features(reference, 1, weights)
    fq1 = extract_features(query, 1, weights)
    warped, grad_x, grad_y = _warp_features(fq1, up_mu)
    c1 = correlate(fr1, warped, 'local', radius)
    sa1, p1 = _local_soft_argmax(c1.values, radius, tau)
    in1 = np.concatenate([c1.values, up_mu, up_phi], axis=-1)
    dec1_out, dec1_cache = stacks['dec1'].forward(in1, p)
    hidden1 = dec1_out[1]
    mu1 = up_mu + sa1 + dec1_out[2]
    u1, cum1_cache = correlation_uncertainty_forward(c1, weights, 1, return_cache=True)
    pred1_out, pred1_cache = stacks['pred1'].forward(
        np.concatenate([u1, hidden1, up_phi], axis=-1), p)
    phi1 = pred1_out[-1]

    predictions = [
        LevelPrediction(0, mu0, phi0[..., :m], phi0[..., m:]),
        LevelPrediction(1, mu1, phi1[..., :m], phi1[..., m:]),
    ]
    if not return_cache:
        return predictions
    cache = {
        'stacks': stacks,
        'dec0': (dec0_out, dec0_cache), 'pred0': (pred0_out, pred0_cache), 'cum0': cum0_cache,
        'dec1': (dec1_out, dec1_cache), 'pred1': (pred1_out, pred1_cache), 'cum1': cum1_cache,
        'fr1': fr1, 'grad_x': grad_x, 'grad_y': grad_y,
        'sa1': sa1, 'p1': p1,
        'channels': {
            'c1': c1.values.shape[-1], 'cum_out': arch.cum_out, 'hidden': arch.flow_widths[1],
        },
    }
    return predictions, cache


def _cum_backward(d_u: np.ndarray, cum_cache, weights: ModelWeights, grads, need_input: bool):
    stack, outputs, caches, (n, h, w) = cum_cache
    d_out = d_u.reshape(outputs[-1].shape)
    d_in = stack.backward(d_out, weights.params, outputs, caches, grads, need_input=need_input)
    if d_in is None:
        return None
    return d_in.reshape((n, h, w, -1))


def backward(cache: dict, output_grads: Sequence[Dict[str, np.ndarray]], weights: ModelWeights
             ) -> Dict[str, np.ndarray]:
    """Gradients for every learnable tensor given dL/d(mu, logits, raw) per level.

    ``output_grads[l]`` holds 'mu', 'component_logits' and 'raw_scales' arrays
    shaped like the level-l prediction. Frozen feature filters get no entry.
    """
    p = weights.params
    arch = weights.architecture
    stacks = cache['stacks']
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    ch = cache['channels']
    radius, tau = arch.search_radius, arch.temperature

    g0, g1 = output_grads
    d_phi1 = np.concatenate([g1['component_logits'], g1['raw_scales']], axis=-1)
    d_phi0 = np.concatenate([g0['component_logits'], g0['raw_scales']], axis=-1)

    # level 1 predictor -> (u1, hidden1, up_phi)
    pred1_out, pred1_cache = cache['pred1']
    d_pin1 = stacks['pred1'].backward(d_phi1, p, pred1_out, pred1_cache, grads)
    d_u1 = d_pin1[..., :ch['cum_out']]
    d_hidden1 = d_pin1[..., ch['cum_out']:ch['cum_out'] + ch['hidden']]
    d_up_phi = d_pin1[..., ch['cum_out'] + ch['hidden']:].copy()

    d_c1 = _cum_backward(d_u1, cache['cum1'], weights, grads, need_input=True)
    d_c1 = d_c1.reshape(d_c1.shape[:3] + (-1,))

    # mu1 = up_mu + soft-argmax + decoder residual
    d_mu1 = g1['mu']
    dec1_out, dec1_cache = cache['dec1']
    d_hidden1 = d_hidden1 + stacks['dec1'].backward(d_mu1, p, dec1_out, dec1_cache, grads,
                                                    start=2, stop=2)
    d_in1 = stacks['dec1'].backward(d_hidden1, p, dec1_out, dec1_cache, grads, start=1, stop=0)
    k = ch['c1']
    d_c1 = d_c1 + d_in1[..., :k]
    d_up_mu = d_mu1 + d_in1[..., k:k + 2]
    d_up_phi += d_in1[..., k + 2:]
    d_c1 = d_c1 + _local_soft_argmax_backward(d_mu1, cache['p1'], cache['sa1'], radius, tau)

    # local correlation against warped query features
    d_warped = _local_correlation_backward(d_c1, cache['fr1'], radius)
    d_up_mu = d_up_mu + np.stack([(d_warped * cache['grad_x']).sum(axis=-1),
                                  (d_warped * cache['grad_y']).sum(axis=-1)], axis=-1)

    d_mu0 = g0['mu'] + 2.0 * upsample_backward(d_up_mu, 2)
    d_phi0 = d_phi0 + upsample_backward(d_up_phi, 2)

    # level 0
    pred0_out, pred0_cache = cache['pred0']
    d_pin0 = stacks['pred0'].backward(d_phi0, p, pred0_out, pred0_cache, grads)
    _cum_backward(d_pin0[..., :ch['cum_out']], cache['cum0'], weights, grads, need_input=False)
    d_hidden0 = d_pin0[..., ch['cum_out']:]

    dec0_out, dec0_cache = cache['dec0']
    d_hidden0 = d_hidden0 + stacks['dec0'].backward(d_mu0, p, dec0_out, dec0_cache, grads,
                                                    start=2, stop=2)
    stacks['dec0'].backward(d_hidden0, p, dec0_out, dec0_cache, grads, start=1, stop=0,
                            need_input=False)
    return grads


# ---------------------------------------------------------------------------
# objective

def _ground_truth_batch(gt_flow, ignore_mask) -> Tuple[np.ndarray, np.ndarray]:
    """Stack flows and masks into (N,H,W,2) targets and an (N,H,W) supervision mask"""
    flows = [gt_flow] if isinstance(gt_flow, FlowField) else list(gt_flow)
    if flows and isinstance(flows[0], FlowField):
        vectors = np.stack([f.vectors for f in flows])
        valid = np.stack([f.valid for f in flows])
    else:
        vectors = np.asarray(gt_flow, dtype=np.float64)
        if vectors.ndim == 3:
            vectors = vectors[None]
        valid = np.isfinite(vectors).all(axis=-1)
    ignored = np.asarray(ignore_mask, dtype=bool).reshape(valid.shape)
    supervised = valid & ~ignored
    return np.where(supervised[..., None], vectors, 0.0), supervised


def level_targets(vectors: np.ndarray, supervised: np.ndarray, stride: int
                  ) -> Tuple[np.ndarray, np.ndarray]:
    """Block-average the flow and divide by the stride; keep blocks whose pixels are all supervised"""
    n, height, width = supervised.shape
    if height % stride or width % stride:
        raise ShapeMismatch(f"ground truth {width}x{height} is not divisible by {stride}")
    blocks = vectors.reshape(n, height // stride, stride, width // stride, stride, 2)
    target = blocks.mean(axis=(2, 4)) / stride
    mask = supervised.reshape(n, height // stride, stride, width // stride, stride).all(axis=(2, 4))
    return target, mask


def masked_multiscale_nll(predictions: Sequence[LevelPrediction], gt_flow, ignore_mask,
                          loss_weights: Sequence[float], weight_decay: float,
                          weights: ModelWeights) -> float:
    """sum_l gamma_l sum_(unmasked) nll, averaged over the batch, plus eta ||theta||^2"""
    vectors, supervised = _ground_truth_batch(gt_flow, ignore_mask)
    n = vectors.shape[0]
    data = 0.0
    for pred, gamma in zip(predictions, loss_weights):
        if gamma == 0:
            continue
        target, mask = level_targets(vectors, supervised, pred.stride)
        per_pixel = nll(target, pred.params(weights.constraints))
        data += gamma * float(np.sum(np.where(mask, per_pixel, 0.0)))
    return data / n + weight_decay * weights.squared_norm()


def loss_and_gradients(query: np.ndarray, reference: np.ndarray, gt_flow, ignore_mask,
                       weights: ModelWeights, loss_weights: Sequence[float],
                       weight_decay: float) -> Tuple[float, Dict[str, np.ndarray]]:
    """Masked multiscale NLL and its gradient for every learnable tensor"""
    predictions, cache = forward(query, reference, weights, return_cache=True)
    vectors, supervised = _ground_truth_batch(gt_flow, ignore_mask)
    n = vectors.shape[0]
    data = 0.0
    output_grads = []
    for pred, gamma in zip(predictions, loss_weights):
        target, mask = level_targets(vectors, supervised, pred.stride)
        params = pred.params(weights.constraints)
        scale = (gamma / n) * mask[..., None]
        if gamma:
            per_pixel = nll(target, params)
            data += gamma * float(np.sum(np.where(mask, per_pixel, 0.0)))
        g = nll_gradient(target, params)
        output_grads.append({
            'mu': g.mu * scale,
            'component_logits': g.component_logits * scale,
            'raw_scales': g.raw_scales * scale,
        })
    grads = backward(cache, output_grads, weights)
    for name, value in weights.params.items():
        grads[name] += 2.0 * weight_decay * value
    loss = data / n + weight_decay * weights.squared_norm()
    return loss, grads
