"""
Encoder
Tiny ViT-style encoder with projection head, mask-token substitution,
masking strategies and the EMA teacher
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.stats import truncnorm

from app.exceptions import MaskLengthMismatch, ShapeMismatch, StructureMismatch
from app.numerics import (
    Tensor,
    as_array,
    concat,
    gather,
    gelu,
    get_dtype,
    l2_normalize,
    layer_norm,
    matmul,
    mean,
    reshape,
    softmax,
    transpose,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class GlobalFeature(str, Enum):
    CLS = 'cls'
    AVG_PATCH = 'avg_patch'


@dataclass
class EncoderConfig:
    """Desk-scale ViT: 32x32 inputs, 4x4 patches, 16x16 local crops"""
    image_size: int = 32
    patch_size: int = 4
    local_size: int = 16
    channels: int = 3
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    proj_hidden: int = 256
    proj_out: int = 256

    def __post_init__(self):
        if self.image_size % self.patch_size or self.local_size % self.patch_size:
            raise ValueError("image_size and local_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.proj_out < 1:
            raise ValueError("proj_out must be at least 1")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid


@dataclass
class MaskSpec:
    """Per-patch mask over the L patch tokens ([CLS] is never masked)"""
    mask: np.ndarray
    ratio: float

    @property
    def num_masked(self):
        return int(self.mask.sum())


@dataclass
class EncoderState:
    """Named parameter set of one encoder (student or teacher)"""
    config: EncoderConfig
    params: dict = field(default_factory=dict)

    def copy(self, requires_grad=False):
        """Structurally identical copy with independent storage"""
        return EncoderState(
            config=self.config,
            params={name: Tensor(p.data.copy(), requires_grad=requires_grad)
                    for name, p in self.params.items()},
        )

    def arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays):
        for name, p in self.params.items():
            if name not in arrays:
                raise StructureMismatch(f"missing parameter '{name}'")
            value = np.asarray(arrays[name], dtype=p.data.dtype)
            if value.shape != p.data.shape:
                raise StructureMismatch(f"'{name}' has shape {value.shape}, expected {p.data.shape}")
            p.data = value.copy()

    def no_decay_names(self):
        """Biases, norm parameters, [CLS] and mask tokens are exempt from weight decay"""
        return {name for name in self.params
                if name.endswith('.bias') or 'norm' in name or name in ('cls_token', 'mask_token')}


def _trunc_normal(rng, shape, std=INIT_STD):
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=std, size=shape, random_state=rng)
    return np.asarray(values, dtype=get_dtype())


def init_encoder(config, seed):
    """
    Build a freshly initialized encoder

    Weights and tokens: truncated normal (std 0.02); biases zero; norm gains one.
    """
    rng = np.random.default_rng(seed)
    dtype = get_dtype()
    E = config.embed_dim
    hidden = E * config.mlp_ratio
    patch_dim = config.patch_size * config.patch_size * config.channels
    arrays = {
        'patch_embed.weight': _trunc_normal(rng, (patch_dim, E)),
        'patch_embed.bias': np.zeros(E, dtype=dtype),
        'cls_token': _trunc_normal(rng, (1, E)),
        'mask_token': _trunc_normal(rng, (1, E)),
        'pos_embed': _trunc_normal(rng, (1 + config.num_patches, E)),
    }
    for i in range(config.depth):
        prefix = f'blocks.{i}'
        for norm in ('norm1', 'norm2'):
            arrays[f'{prefix}.{norm}.weight'] = np.ones(E, dtype=dtype)
            arrays[f'{prefix}.{norm}.bias'] = np.zeros(E, dtype=dtype)
        for proj in ('q', 'k', 'v', 'proj'):
            arrays[f'{prefix}.attn.{proj}.weight'] = _trunc_normal(rng, (E, E))
            arrays[f'{prefix}.attn.{proj}.bias'] = np.zeros(E, dtype=dtype)
        arrays[f'{prefix}.mlp.fc1.weight'] = _trunc_normal(rng, (E, hidden))
        arrays[f'{prefix}.mlp.fc1.bias'] = np.zeros(hidden, dtype=dtype)
        arrays[f'{prefix}.mlp.fc2.weight'] = _trunc_normal(rng, (hidden, E))
        arrays[f'{prefix}.mlp.fc2.bias'] = np.zeros(E, dtype=dtype)
    arrays['norm.weight'] = np.ones(E, dtype=dtype)
    arrays['norm.bias'] = np.zeros(E, dtype=dtype)
    arrays['head.fc1.weight'] = _trunc_normal(rng, (E, config.proj_hidden))
    arrays['head.fc1.bias'] = np.zeros(config.proj_hidden, dtype=dtype)
    arrays['head.fc2.weight'] = _trunc_normal(rng, (config.proj_hidden, config.proj_out))
    arrays['head.fc2.bias'] = np.zeros(config.proj_out, dtype=dtype)

    params = {name: Tensor(value, requires_grad=True) for name, value in arrays.items()}
    logger.debug("initialized encoder with %d tensors", len(params))
    return EncoderState(config=config, params=params)


# ----------------------------------------------------------------------------
# forward pass
# ----------------------------------------------------------------------------

def patchify(images, patch_size):
    """B x H x W x C images -> B x L x (p*p*C) row-major patch vectors"""
    B, H, W, C = images.shape
    p = patch_size
    grid_h, grid_w = H // p, W // p
    x = images.reshape(B, grid_h, p, grid_w, p, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, grid_h * grid_w, p * p * C)


@lru_cache(maxsize=16)
def _interp_1d(size_from, size_to):
    weights = np.zeros((size_to, size_from), dtype=np.float64)
    for i in range(size_to):
        src = min(max((i + 0.5) * size_from / size_to - 0.5, 0.0), size_from - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, size_from - 1)
        frac = src - lo
        weights[i, lo] += 1.0 - frac
        weights[i, hi] += frac
    return weights


def interpolate_pos_embed(grid_from, grid_to):
    """
    Bilinear resampling matrix between square positional grids

    Returns a grid_to^2 x grid_from^2 matrix; identity when the grids match.
    """
    w = _interp_1d(grid_from, grid_to)
    return np.kron(w, w).astype(get_dtype())


def _linear(x, params, prefix):
    return matmul(x, params[f'{prefix}.weight']) + params[f'{prefix}.bias']


def _norm(x, params, prefix):
    return layer_norm(x) * params[f'{prefix}.weight'] + params[f'{prefix}.bias']


def _attention(x, params, prefix, heads):
    B, N, E = x.shape
    head_dim = E // heads

    def split(t):
        return transpose(reshape(t, (B, N, heads, head_dim)), (0, 2, 1, 3))

    q = split(_linear(x, params, f'{prefix}.q'))
    k = split(_linear(x, params, f'{prefix}.k'))
    v = split(_linear(x, params, f'{prefix}.v'))
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(head_dim))
    out = matmul(softmax(scores, axis=-1), v)
    out = reshape(transpose(out, (0, 2, 1, 3)), (B, N, E))
    return _linear(out, params, f'{prefix}.proj')


def _block(x, params, prefix, heads):
    x = x + _attention(_norm(x, params, f'{prefix}.norm1'), params, f'{prefix}.attn', heads)
    hidden = gelu(_linear(_norm(x, params, f'{prefix}.norm2'), params, f'{prefix}.mlp.fc1'))
    return x + _linear(hidden, params, f'{prefix}.mlp.fc2')


def _mask_array(masks, batch, num_patches):
    if isinstance(masks, MaskSpec):
        masks = [masks] * batch
    if isinstance(masks, np.ndarray):
        mask = masks.astype(bool)
    else:
        mask = np.stack([m.mask if isinstance(m, MaskSpec) else np.asarray(m) for m in masks]).astype(bool)
    if mask.shape != (batch, num_patches):
        raise MaskLengthMismatch(f"mask shape {mask.shape}, expected {(batch, num_patches)}")
    return mask


def encode(state, images, masks=None):
    """
    Run the encoder

    Args:
        state (EncoderState): parameters
        images: B x H x W x C normalized inputs; H may be the global or the
                local crop size (positional embeddings are interpolated)
        masks: optional MaskSpec, list of B MaskSpec, or B x L boolean array;
               masked patch embeddings are replaced by the mask token

    Returns:
        tuple: (cls B x d, patches B x L x d), both row-L2-normalized
    """
    cfg = state.config
    P = state.params
    x = as_array(images)
    if x.ndim != 4 or x.shape[1] != x.shape[2] or x.shape[1] % cfg.patch_size or x.shape[3] != cfg.channels:
        raise ShapeMismatch(f"images of shape {x.shape} do not fit patch size {cfg.patch_size}")
    B = x.shape[0]
    grid = x.shape[1] // cfg.patch_size
    L = grid * grid

    tokens = _linear(patchify(x, cfg.patch_size), P, 'patch_embed')
    if masks is not None:
        m = _mask_array(masks, B, L)[:, :, None].astype(x.dtype)
        tokens = tokens * (1.0 - m) + P['mask_token'] * m

    cls = P['cls_token'] * np.ones((B, 1, 1), dtype=x.dtype)
    h = concat([cls, tokens], axis=1)

    pos = P['pos_embed']
    pos_patch = gather(pos, np.arange(1, 1 + cfg.num_patches), axis=0)
    if grid != cfg.grid:
        pos_patch = matmul(interpolate_pos_embed(cfg.grid, grid), pos_patch)
    h = h + concat([gather(pos, [0], axis=0), pos_patch], axis=0)

    for i in range(cfg.depth):
        h = _block(h, P, f'blocks.{i}', cfg.heads)
    h = _norm(h, P, 'norm')

    z = _linear(gelu(_linear(h, P, 'head.fc1')), P, 'head.fc2')
    z = l2_normalize(z, axis=-1)
    cls_out = reshape(gather(z, [0], axis=1), (B, cfg.proj_out))
    patches_out = gather(z, np.arange(1, 1 + L), axis=1)
    return cls_out, patches_out


def pool_global(cls, patches, mode):
    """Pick the image-level feature: the [CLS] output or the normalized patch average"""
    if GlobalFeature(mode) is GlobalFeature.CLS:
        return cls
    return l2_normalize(mean(patches, axis=1), axis=-1)


def global_feature(state, images, mode=GlobalFeature.CLS):
    cls, patches = encode(state, images)
    return pool_global(cls, patches, mode)


# ----------------------------------------------------------------------------
# masking
# ----------------------------------------------------------------------------

def random_mask(L, ratio, rng):
    """Mask exactly round(ratio * L) positions chosen uniformly"""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    count = int(math.floor(ratio * L + 0.5))
    mask = np.zeros(L, dtype=bool)
    mask[rng.permutation(L)[:count]] = True
    return MaskSpec(mask=mask, ratio=ratio)


def block_mask(grid_h, grid_w, ratio, rng, attempts=10):
    """
    Blockwise masking: add random rectangles until the ratio is reached

    Rectangles have aspect ratio in [0.3, 1/0.3] and cover at least 4 cells
    when the grid allows it. The achieved fraction lands in
    [ratio, ratio + 0.1]; if no rectangle fits the remaining budget after
    `attempts` tries, a single random cell is masked instead.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    L = grid_h * grid_w
    target = int(math.ceil(ratio * L - 1e-9))
    upper = max(target, int(math.floor((ratio + 0.1) * L + 1e-9)))
    min_area = 4 if grid_h >= 2 and grid_w >= 2 else 1
    log_aspect = (math.log(0.3), math.log(1 / 0.3))

    mask = np.zeros((grid_h, grid_w), dtype=bool)
    count = 0
    while count < target:
        budget = upper - count
        added = 0
        for _ in range(attempts):
            area = rng.uniform(min_area, max(min_area, budget))
            aspect = math.exp(rng.uniform(*log_aspect))
            h = max(1, int(round(math.sqrt(area * aspect))))
            w = max(1, int(round(math.sqrt(area / aspect))))
            if h > grid_h or w > grid_w or h * w < min_area:
                continue
            top = int(rng.integers(0, grid_h - h + 1))
            left = int(rng.integers(0, grid_w - w + 1))
            new = int((~mask[top:top + h, left:left + w]).sum())
            if 0 < new <= budget:
                mask[top:top + h, left:left + w] = True
                added = new
                break
        if added == 0:
            free = np.flatnonzero(~mask.reshape(-1))
            mask.reshape(-1)[free[int(rng.integers(0, len(free)))]] = True
            added = 1
        count += added
    return MaskSpec(mask=mask.reshape(-1), ratio=ratio)


def make_mask(strategy, grid, ratio, rng):
    if strategy == 'block':
        return block_mask(grid, grid, ratio, rng)
    if strategy == 'random':
        return random_mask(grid * grid, ratio, rng)
    raise ValueError(f"unknown mask strategy '{strategy}'")


# ----------------------------------------------------------------------------
# teacher
# ----------------------------------------------------------------------------

def ema_arrays(target, source, m):
    """In-place target <- m * target + (1 - m) * source; exact at m = 0 and m = 1"""
    if m >= 1.0:
        return target
    if m <= 0.0:
        target[...] = source
        return target
    target[...] = (m * target + (1.0 - m) * source).astype(target.dtype, copy=False)
    return target


def ema_update(teacher, student, m):
    """
    Move every teacher parameter toward the student's

    Args:
        teacher (EncoderState): updated in place
        student (EncoderState): source weights
        m (float): momentum in [0, 1]

    Returns:
        EncoderState: the teacher
    """
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must be in [0, 1], got {m}")
    if set(teacher.params) != set(student.params):
        raise StructureMismatch("teacher and student parameter names differ")
    for name, t in teacher.params.items():
        s = student.params[name]
        if t.data.shape != s.data.shape:
            raise StructureMismatch(f"'{name}': teacher {t.data.shape} vs student {s.data.shape}")
        ema_arrays(t.data, s.data, m)
    return teacher


def momentum_schedule(step, total_steps, m0):
    """Cosine ramp of the EMA momentum from m0 at step 0 to exactly 1 at the end"""
    if step <= 0:
        return m0
    if step >= total_steps:
        return 1.0
    return 1.0 - (1.0 - m0) * (math.cos(math.pi * step / total_steps) + 1.0) / 2.0
