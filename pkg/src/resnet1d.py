"""
ResNet-1D Classifier in NumPy
Residual 1D convnet with batch statistics, a layer-level reverse-mode tape,
weighted cross-entropy and a versioned binary checkpoint format.
All arithmetic is float64.
"""

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from seeding import philox_generator

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LAMBDA_POS = 3.0


class ShapeError(ValueError):
    """Raised when inputs or parameter vectors do not match the architecture"""


@dataclass(frozen=True)
class BlockSpec:
    out_channels: int
    kernel: int
    stride: int = 1


DEFAULT_BLOCKS = (BlockSpec(32, 5), BlockSpec(64, 5, 2), BlockSpec(64, 3))


@dataclass(frozen=True)
class ArchSpec:
    """Stem conv, residual blocks, global average pool and a 2-logit head"""

    in_channels: int
    length: int = 30
    stem_channels: int = 32
    stem_kernel: int = 7
    blocks: Tuple[BlockSpec, ...] = DEFAULT_BLOCKS
    use_norm: bool = True
    momentum: float = 0.1
    eps: float = 1e-5
    n_classes: int = 2

    def validate(self) -> "ArchSpec":
        kernels = [self.stem_kernel] + [b.kernel for b in self.blocks]
        if any(k % 2 == 0 or k < 1 for k in kernels):
            raise ShapeError(f"every kernel must be odd, got {kernels}")
        if self.in_channels < 1 or self.length < 1:
            raise ShapeError("in_channels and length must be positive")
        if any(b.stride < 1 for b in self.blocks):
            raise ShapeError("block strides must be positive")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data['blocks'] = [asdict(b) for b in self.blocks]
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ArchSpec":
        data = dict(data)
        data['blocks'] = tuple(BlockSpec(**b) for b in data.get('blocks', []))
        return cls(**data)


Backward = Callable[[np.ndarray], np.ndarray]


class ResNet1D:
    """
    Parameters and running statistics live in flat float64 vectors; named
    views into them are built from the architecture layout.
    """

    def __init__(self, arch: ArchSpec):
        self.arch = arch.validate()
        self.layout: List[Tuple[str, Tuple[int, ...], str]] = []
        self.norm_layers: List[Tuple[str, int]] = []
        self._build_layout()

        self.offsets: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        position = 0
        for name, shape, _ in self.layout:
            self.offsets[name] = (position, shape)
            position += int(np.prod(shape))
        self.n_params = position

        self.stat_offsets: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        position = 0
        for name, channels in self.norm_layers:
            for suffix in ('running_mean', 'running_var'):
                self.stat_offsets[f"{name}.{suffix}"] = (position, (channels,))
                position += channels
        self.n_stats = position

    # Layout

    def _conv_entry(self, name: str, cout: int, cin: int, kernel: int):
        self.layout.append((f"{name}.w", (cout, cin, kernel), 'kernel'))
        if not self.arch.use_norm:
            self.layout.append((f"{name}.b", (cout,), 'bias'))

    def _norm_entry(self, name: str, channels: int):
        if self.arch.use_norm:
            self.layout.append((f"{name}.gamma", (channels,), 'gamma'))
            self.layout.append((f"{name}.beta", (channels,), 'beta'))
            self.norm_layers.append((name, channels))

    def _build_layout(self):
        arch = self.arch
        self._conv_entry('stem.conv', arch.stem_channels, arch.in_channels, arch.stem_kernel)
        self._norm_entry('stem.bn', arch.stem_channels)
        channels = arch.stem_channels
        for i, block in enumerate(arch.blocks):
            prefix = f"block{i}"
            self._conv_entry(f"{prefix}.conv1", block.out_channels, channels, block.kernel)
            self._norm_entry(f"{prefix}.bn1", block.out_channels)
            self._conv_entry(f"{prefix}.conv2", block.out_channels, block.out_channels, block.kernel)
            self._norm_entry(f"{prefix}.bn2", block.out_channels)
            if self._has_projection(channels, block):
                self._conv_entry(f"{prefix}.proj", block.out_channels, channels, 1)
                self._norm_entry(f"{prefix}.proj_bn", block.out_channels)
            channels = block.out_channels
        self.layout.append(('head.w', (arch.n_classes, channels), 'kernel'))
        self.layout.append(('head.b', (arch.n_classes,), 'bias'))

    @staticmethod
    def _has_projection(channels: int, block: BlockSpec) -> bool:
        return block.stride != 1 or channels != block.out_channels

    def views(self, vector: np.ndarray) -> Dict[str, np.ndarray]:
        if vector.shape != (self.n_params,):
            raise ShapeError(f"parameter vector has shape {vector.shape}, expected ({self.n_params},)")
        return {name: vector[start:start + int(np.prod(shape))].reshape(shape)
                for name, (start, shape) in self.offsets.items()}

    def stat_views(self, vector: np.ndarray) -> Dict[str, np.ndarray]:
        if vector.shape != (self.n_stats,):
            raise ShapeError(f"stats vector has shape {vector.shape}, expected ({self.n_stats},)")
        return {name: vector[start:start + shape[0]] for name, (start, shape) in self.stat_offsets.items()}

    # Initialization

    def init_params(self, seed: int, *stream: int) -> np.ndarray:
        """He-normal kernels (fan-in), zero biases and shifts, unit scales"""
        rng = philox_generator(seed, 0x5EED, *stream)
        params = np.zeros(self.n_params)
        views = self.views(params)
        for name, shape, kind in self.layout:
            if kind == 'kernel':
                fan_in = int(np.prod(shape[1:]))
                views[name][...] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
            elif kind == 'gamma':
                views[name][...] = 1.0
        return params

    def init_stats(self) -> np.ndarray:
        stats = np.zeros(self.n_stats)
        for name, view in self.stat_views(stats).items():
            if name.endswith('running_var'):
                view[...] = 1.0
        return stats

    def decay_mask(self) -> np.ndarray:
        """1.0 on convolution and head kernels; norm scale/shift and biases are exempt"""
        mask = np.zeros(self.n_params)
        views = self.views(mask)
        for name, _, kind in self.layout:
            if kind == 'kernel':
                views[name][...] = 1.0
        return mask

    # Layers: each returns (output, backward closure)

    @staticmethod
    def _conv(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], stride: int,
              grads: Optional[Dict[str, np.ndarray]], name: str) -> Tuple[np.ndarray, Backward]:
        kernel = w.shape[2]
        pad = kernel // 2
        length = x.shape[2]
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        windows = sliding_window_view(padded, kernel, axis=2)[:, :, ::stride, :]
        out = np.tensordot(windows, w, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
        if b is not None:
            out = out + b[None, :, None]

        def backward(dout: np.ndarray) -> np.ndarray:
            if grads is not None:
                grads[f"{name}.w"] += np.tensordot(dout, windows, axes=([0, 2], [0, 2]))
                if b is not None:
                    grads[f"{name}.b"] += dout.sum(axis=(0, 2))
            dwindows = np.tensordot(dout, w, axes=([1], [0]))
            dpadded = np.zeros_like(padded)
            n_out = dout.shape[2]
            for j in range(kernel):
                dpadded[:, :, j:j + stride * (n_out - 1) + 1:stride] += dwindows[:, :, :, j].transpose(0, 2, 1)
            return dpadded[:, :, pad:pad + length]

        return out, backward

    def _norm(self, x: np.ndarray, params: Dict[str, np.ndarray], stats: Optional[Dict[str, np.ndarray]],
              name: str, train: bool, update_stats: bool,
              grads: Optional[Dict[str, np.ndarray]]) -> Tuple[np.ndarray, Backward]:
        gamma = params[f"{name}.gamma"]
        beta = params[f"{name}.beta"]
        eps = self.arch.eps
        if train:
            n = x.shape[0] * x.shape[2]
            mean = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
            if update_stats and stats is not None:
                momentum = self.arch.momentum
                unbiased = var * n / (n - 1) if n > 1 else var
                running_mean = stats[f"{name}.running_mean"]
                running_var = stats[f"{name}.running_var"]
                running_mean *= 1.0 - momentum
                running_mean += momentum * mean
                running_var *= 1.0 - momentum
                running_var += momentum * unbiased
        else:
            if stats is None:
                running_mean = np.zeros_like(gamma)
                running_var = np.ones_like(gamma)
            else:
                running_mean = stats[f"{name}.running_mean"].copy()
                running_var = stats[f"{name}.running_var"].copy()
            inv_std = 1.0 / np.sqrt(running_var + eps)
            xhat = (x - running_mean[None, :, None]) * inv_std[None, :, None]
        out = gamma[None, :, None] * xhat + beta[None, :, None]

        def backward(dout: np.ndarray) -> np.ndarray:
            if grads is not None:
                grads[f"{name}.gamma"] += (dout * xhat).sum(axis=(0, 2))
                grads[f"{name}.beta"] += dout.sum(axis=(0, 2))
            dxhat = dout * gamma[None, :, None]
            if not train:
                return dxhat * inv_std[None, :, None]
            n = x.shape[0] * x.shape[2]
            return (inv_std[None, :, None] / n) * (
                n * dxhat
                - dxhat.sum(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True))

        return out, backward

    @staticmethod
    def _relu(x: np.ndarray) -> Tuple[np.ndarray, Backward]:
        active = x > 0
        return np.where(active, x, 0.0), lambda dout: dout * active

    def _conv_norm(self, x, params, stats, name, norm_name, stride, train, update_stats, grads, tape):
        bias = None if self.arch.use_norm else params[f"{name}.b"]
        out, backward = self._conv(x, params[f"{name}.w"], bias, stride, grads, name)
        tape.append(backward)
        if self.arch.use_norm:
            out, backward = self._norm(out, params, stats, norm_name, train, update_stats, grads)
            tape.append(backward)
        return out

    # Network

    def _run(self, params: np.ndarray, x: np.ndarray, train: bool, stats: Optional[np.ndarray],
             update_stats: bool, grads: Optional[Dict[str, np.ndarray]]):
        arch = self.arch
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != arch.in_channels or x.shape[2] != arch.length:
            raise ShapeError(f"input shape {x.shape} does not match (B, {arch.in_channels}, {arch.length})")
        p = self.views(params)
        s = self.stat_views(stats) if stats is not None else None
        tape: List[Backward] = []

        h = self._conv_norm(x, p, s, 'stem.conv', 'stem.bn', 1, train, update_stats, grads, tape)
        h, backward = self._relu(h)
        tape.append(backward)

        channels = arch.stem_channels
        for i, block in enumerate(arch.blocks):
            prefix = f"block{i}"
            main_tape: List[Backward] = []
            main = self._conv_norm(h, p, s, f"{prefix}.conv1", f"{prefix}.bn1", block.stride,
                                   train, update_stats, grads, main_tape)
            main, backward = self._relu(main)
            main_tape.append(backward)
            main = self._conv_norm(main, p, s, f"{prefix}.conv2", f"{prefix}.bn2", 1,
                                   train, update_stats, grads, main_tape)

            short_tape: List[Backward] = []
            if self._has_projection(channels, block):
                shortcut = self._conv_norm(h, p, s, f"{prefix}.proj", f"{prefix}.proj_bn", block.stride,
                                           train, update_stats, grads, short_tape)
            else:
                shortcut = h
            h, relu_backward = self._relu(main + shortcut)

            def block_backward(dout, main_tape=main_tape, short_tape=short_tape, relu_backward=relu_backward):
                dsum = relu_backward(dout)
                dmain = dsum
                for backward in reversed(main_tape):
                    dmain = backward(dmain)
                dshort = dsum
                for backward in reversed(short_tape):
                    dshort = backward(dshort)
                return dmain + dshort

            tape.append(block_backward)
            channels = block.out_channels

        length = h.shape[2]
        pooled = h.mean(axis=2)
        tape.append(lambda dout: np.repeat(dout[:, :, None] / length, length, axis=2))

        logits = pooled @ p['head.w'].T + p['head.b']

        def head_backward(dout: np.ndarray) -> np.ndarray:
            if grads is not None:
                grads['head.w'] += dout.T @ pooled
                grads['head.b'] += dout.sum(axis=0)
            return dout @ p['head.w']

        tape.append(head_backward)
        return logits, pooled, tape

    def forward(self, params: np.ndarray, x: np.ndarray, mode: str = 'eval',
                stats: Optional[np.ndarray] = None, update_stats: bool = True) -> np.ndarray:
        """
        B x 2 logits

        Args:
            params: Flat parameter vector
            x: B x F x L input
            mode: 'train' normalizes with batch statistics, 'eval' with running statistics
            stats: Running statistics vector, updated in place in train mode
            update_stats: Leave running statistics untouched when False
        """
        logits, _, _ = self._run(params, x, self._is_train(mode), stats, update_stats, None)
        return logits

    def pre_head(self, params: np.ndarray, x: np.ndarray, mode: str = 'eval',
                 stats: Optional[np.ndarray] = None) -> np.ndarray:
        """Pooled activations feeding the head (B x C)"""
        _, pooled, _ = self._run(params, x, self._is_train(mode), stats, False, None)
        return pooled

    def loss_and_grad(self, params: np.ndarray, x: np.ndarray, labels: np.ndarray,
                      lambda_pos: float = LAMBDA_POS, mode: str = 'train',
                      stats: Optional[np.ndarray] = None, update_stats: bool = True) -> Tuple[float, np.ndarray]:
        """Weighted cross-entropy and its exact gradient with respect to every parameter"""
        grad = np.zeros(self.n_params)
        grad_views = self.views(grad)
        logits, _, tape = self._run(params, x, self._is_train(mode), stats, update_stats, grad_views)
        loss, dlogits = weighted_ce(logits, labels, lambda_pos, with_grad=True)
        upstream = dlogits
        for backward in reversed(tape):
            upstream = backward(upstream)
        return loss, grad

    @staticmethod
    def _is_train(mode: str) -> bool:
        if mode not in ('train', 'eval'):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return mode == 'train'


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def weighted_ce(logits: np.ndarray, labels: np.ndarray, lambda_pos: float = LAMBDA_POS,
                with_grad: bool = False):
    """
    (1/B) sum_i w_i * -log softmax(logits_i)[label_i], w_i = lambda_pos for label 1

    Returns the loss, or (loss, dloss/dlogits) when with_grad is set.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    batch = logits.shape[0]
    weights = np.where(labels == 1, lambda_pos, 1.0)
    logp = log_softmax(logits)
    picked = logp[np.arange(batch), labels]
    loss = float(np.sum(weights * -picked) / batch)
    if not with_grad:
        return loss
    onehot = np.zeros_like(logits)
    onehot[np.arange(batch), labels] = 1.0
    dlogits = (np.exp(logp) - onehot) * (weights / batch)[:, None]
    return loss, dlogits


def softmax_positive(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits)[:, 1])


@dataclass
class ModelCheckpoint:
    """Trained network plus everything needed to apply it to new windows"""

    arch: ArchSpec
    params: np.ndarray
    stats: np.ndarray
    features: List[str]
    column_version: str
    label_params: dict
    seed: int
    epoch: int
    val_macro_f1: float
    input_mean: List[float] = field(default_factory=list)
    input_std: List[float] = field(default_factory=list)
    fold: int = 0
    train_patients: List[str] = field(default_factory=list)
    val_patients: List[str] = field(default_factory=list)
    version: int = CHECKPOINT_VERSION

    def network(self) -> ResNet1D:
        return ResNet1D(self.arch)

    def validate(self) -> "ModelCheckpoint":
        net = self.network()
        if self.params.shape != (net.n_params,):
            raise ShapeError(f"checkpoint has {self.params.size} parameters, architecture needs {net.n_params}")
        if self.stats.shape != (net.n_stats,):
            raise ShapeError(f"checkpoint has {self.stats.size} statistics, architecture needs {net.n_stats}")
        if len(self.features) != self.arch.in_channels:
            raise ShapeError("feature manifest length differs from in_channels")
        return self

    def header(self) -> dict:
        return {
            'version': self.version,
            'arch': self.arch.to_dict(),
            'features': list(self.features),
            'column_version': self.column_version,
            'label_params': self.label_params,
            'seed': self.seed,
            'epoch': self.epoch,
            'val_macro_f1': self.val_macro_f1,
            'input_mean': list(self.input_mean),
            'input_std': list(self.input_std),
            'fold': self.fold,
            'train_patients': list(self.train_patients),
            'val_patients': list(self.val_patients),
            'n_params': int(self.params.size),
            'n_stats': int(self.stats.size),
        }

    def save(self, path: str) -> str:
        """uint64 LE header length, sorted-key JSON header, float64 LE params then stats"""
        self.validate()
        header = json.dumps(self.header(), sort_keys=True, separators=(',', ':')).encode('utf-8')
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'wb') as f:
            f.write(struct.pack('<Q', len(header)))
            f.write(header)
            f.write(self.params.astype('<f8').tobytes())
            f.write(self.stats.astype('<f8').tobytes())
        return path

    @classmethod
    def load(cls, path: str) -> "ModelCheckpoint":
        with open(path, 'rb') as f:
            (size,) = struct.unpack('<Q', f.read(8))
            header = json.loads(f.read(size).decode('utf-8'))
            if header.get('version') != CHECKPOINT_VERSION:
                raise ShapeError(f"unsupported checkpoint version {header.get('version')}")
            body = np.frombuffer(f.read(), dtype='<f8').astype(np.float64)
        n_params, n_stats = header['n_params'], header['n_stats']
        if body.size != n_params + n_stats:
            raise ShapeError(f"checkpoint body holds {body.size} values, header declares {n_params + n_stats}")
        return cls(
            arch=ArchSpec.from_dict(header['arch']),
            params=body[:n_params].copy(),
            stats=body[n_params:].copy(),
            features=header['features'],
            column_version=header['column_version'],
            label_params=header['label_params'],
            seed=header['seed'],
            epoch=header['epoch'],
            val_macro_f1=header['val_macro_f1'],
            input_mean=header['input_mean'],
            input_std=header['input_std'],
            fold=header['fold'],
            train_patients=header['train_patients'],
            val_patients=header['val_patients'],
            version=header['version'],
        ).validate()

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return standardize(x, np.asarray(self.input_mean), np.asarray(self.input_std))

    def predict_proba(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        """Positive-class probability for raw (unstandardized) B x F x L windows"""
        return softmax_positive(self.logits(x, batch))

    def logits(self, x: np.ndarray, batch: int = 256) -> np.ndarray:
        net = self.network()
        x = self.standardize(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 0:
            return np.zeros((0, self.arch.n_classes))
        return np.concatenate([net.forward(self.params, x[i:i + batch], 'eval', self.stats)
                               for i in range(0, x.shape[0], batch)])


INPUT_CLIP = 10.0


def fit_standardizer(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and SD over all windows and timesteps of B x F x L"""
    mean = x.mean(axis=(0, 2))
    std = x.std(axis=(0, 2))
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def standardize(x: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    if mean.size == 0:
        return x
    return np.clip((x - mean[None, :, None]) / std[None, :, None], -INPUT_CLIP, INPUT_CLIP)


def arch_for(n_features: int, length: int, blocks: Sequence[BlockSpec] = DEFAULT_BLOCKS, **kwargs) -> ArchSpec:
    return ArchSpec(in_channels=n_features, length=length, blocks=tuple(blocks), **kwargs).validate()
