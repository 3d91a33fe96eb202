"""
Trainer
Configuration, the SOP training step, schedules, checkpoints and the run loop
"""
import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum

import numpy as np
from tqdm import tqdm

from app.data import BatchPrefetcher
from app.exceptions import (
    CheckpointCorrupt,
    ConfigInvalid,
    IoError,
    NonFiniteLoss,
    ResumeMismatch,
)
from app.memory import ContributionMode, init_bank
from app.model import (
    EncoderConfig,
    GlobalFeature,
    ema_arrays,
    ema_update,
    encode,
    init_encoder,
    make_mask,
    momentum_schedule,
    pool_global,
)
from app.numerics import no_grad
from app.objective import (
    LossWeights,
    PrototypeBaseline,
    cls_loss,
    mean_entropy,
    parametric_cls_loss,
    parametric_mim_loss,
    prototype_probs,
    sop_mim_loss,
    sop_probs,
    teacher_temperature,
    total_loss,
)
from app.optim import AdamW
from app.rng import derive_seed, make_rng

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
METRICS_HEADER = ['step', 'loss_total', 'loss_cls', 'loss_patch', 'teacher_entropy',
                  'feature_std', 'ema_m', 'lr']


class TrainMode(str, Enum):
    SOP = 'sop'
    PARAMETRIC_BASELINE = 'parametric_baseline'
    CLS_ONLY = 'cls_only'
    MIM_ONLY = 'mim_only'


@dataclass
class TrainConfig:
    """
    Every knob of a training run

    The defaults here are the published defaults table (mirrored in the
    repository's config.json). K / k are the [CLS] anchors and extra support
    embeddings, K_dot / k_dot their patch-level counterparts, N_C / N_p the
    memory capacities and d the embedding width.
    """
    steps: int = 2000
    batch_size: int = 64
    v_local: int = 4
    K: int = 256
    k: int = 8
    K_dot: int = 64
    k_dot: int = 0
    N_C: int = 1024
    N_p: int = 1024
    d: int = 256
    cls_contribution: str = 'similarity'
    mim_contribution: str = 'smoothed'
    smoothing: float = 0.1
    tau_s: float = 0.1
    tau_t: float = 0.07
    tau_t_warmup: float = 0.04
    tau_t_warmup_frac: float = 0.1
    m0: float = 0.994
    mask_strategy: str = 'block'
    mask_ratio: float = 0.3
    tasks_cls: int = 2
    tasks_mim: int = 1
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_frac: float = 0.1
    weight_decay: float = 0.04
    seed: int = 0
    mode: str = 'sop'
    fixed_anchors: bool = False
    global_feature: str = 'cls'
    num_prototypes: int = 256
    centering: bool = True
    center_momentum: float = 0.9
    image_size: int = 32
    patch_size: int = 4
    local_size: int = 16
    channels: int = 3
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: int = 2
    proj_hidden: int = 256
    checkpoint_every: int = 500
    log_every: int = 50
    prefetch: int = 2

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, data):
        """
        Build a config from a partial dict

        Missing keys take their defaults; unknown keys and wrongly typed
        values raise ConfigInvalid naming the field.
        """
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigInvalid(key, "unknown field")
            default = known[key].default
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigInvalid(key, f"expected a boolean, got {value!r}")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigInvalid(key, f"expected an integer, got {value!r}")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigInvalid(key, f"expected a number, got {value!r}")
                value = float(value)
            elif not isinstance(value, str):
                raise ConfigInvalid(key, f"expected a string, got {value!r}")
            values[key] = value
        return cls(**values)

    def to_dict(self):
        return asdict(self)

    def validate(self):
        def check(ok, name, message):
            if not ok:
                raise ConfigInvalid(name, message)

        for name in ('steps', 'v_local', 'k', 'k_dot', 'tasks_cls', 'tasks_mim', 'checkpoint_every', 'log_every'):
            check(getattr(self, name) >= 0, name, "must be non-negative")
        for name in ('batch_size', 'K', 'K_dot', 'N_C', 'N_p', 'd', 'num_prototypes', 'prefetch'):
            check(getattr(self, name) >= 1, name, "must be at least 1")
        check(self.K <= self.N_C, 'K', f"K={self.K} exceeds N_C={self.N_C}")
        check(self.K_dot <= self.N_p, 'K_dot', f"K_dot={self.K_dot} exceeds N_p={self.N_p}")
        check(self.k + 1 <= self.N_C, 'k', "k+1 exceeds N_C")
        check(self.k_dot + 1 <= self.N_p, 'k_dot', "k_dot+1 exceeds N_p")
        check(0.0 <= self.smoothing < 1.0, 'smoothing', "must be in [0, 1)")
        for name in ('tau_s', 'tau_t', 'tau_t_warmup', 'lr'):
            check(getattr(self, name) > 0, name, "must be positive")
        check(0.0 <= self.min_lr <= self.lr, 'min_lr', "must be in [0, lr]")
        check(0.0 <= self.m0 <= 1.0, 'm0', "must be in [0, 1]")
        check(0.0 <= self.mask_ratio <= 1.0, 'mask_ratio', "must be in [0, 1]")
        check(0.0 <= self.warmup_frac < 1.0, 'warmup_frac', "must be in [0, 1)")
        check(0.0 <= self.tau_t_warmup_frac < 1.0, 'tau_t_warmup_frac', "must be in [0, 1)")
        check(0.0 <= self.center_momentum <= 1.0, 'center_momentum', "must be in [0, 1]")
        check(self.lambda1 >= 0 and self.lambda2 >= 0, 'lambda1' if self.lambda1 < 0 else 'lambda2',
              "must be non-negative")
        check(self.weight_decay >= 0, 'weight_decay', "must be non-negative")
        check(self.mask_strategy in ('block', 'random'), 'mask_strategy', "must be 'block' or 'random'")
        for name in ('cls_contribution', 'mim_contribution'):
            try:
                ContributionMode.parse(getattr(self, name), self.smoothing)
            except ValueError as e:
                raise ConfigInvalid(name, str(e)) from e
        try:
            mode = TrainMode(self.mode)
        except ValueError as e:
            raise ConfigInvalid('mode', f"unknown mode '{self.mode}'") from e
        try:
            GlobalFeature(self.global_feature)
        except ValueError as e:
            raise ConfigInvalid('global_feature', "must be 'cls' or 'avg_patch'") from e
        check(not self.fixed_anchors or mode is TrainMode.SOP, 'fixed_anchors', "requires mode 'sop'")
        check(self.uses_cls or self.uses_mim, 'tasks_cls', "the selected mode leaves no task to train")
        try:
            self.encoder_config()
        except ValueError as e:
            raise ConfigInvalid('image_size', str(e)) from e

    @property
    def train_mode(self):
        return TrainMode(self.mode)

    @property
    def uses_cls(self):
        return self.tasks_cls > 0 and TrainMode(self.mode) is not TrainMode.MIM_ONLY

    @property
    def uses_mim(self):
        return self.tasks_mim > 0 and TrainMode(self.mode) is not TrainMode.CLS_ONLY

    def encoder_config(self):
        return EncoderConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            local_size=self.local_size,
            channels=self.channels,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            proj_hidden=self.proj_hidden,
            proj_out=self.d,
        )

    def loss_weights(self):
        return LossWeights(self.lambda1, self.lambda2)


def config_hash(config):
    """sha256 over the canonical JSON of the full config"""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(canonical.encode('utf-8')).hexdigest()


def load_config(path):
    """Read a (partial) JSON config; missing keys take their defaults"""
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigInvalid(os.path.basename(path), f"invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigInvalid(os.path.basename(path), "top level must be an object")
    return TrainConfig.from_dict(data)


def save_config(config, path):
    try:
        with open(path, 'w') as f:
            json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    except OSError as e:
        raise IoError(f"cannot write config {path}: {e}") from e


def fixed_anchor_mode(config):
    """Variant whose anchors are drawn once at step 0 and reused every step"""
    if config.train_mode is not TrainMode.SOP:
        raise ConfigInvalid('mode', "fixed anchors are only defined for mode 'sop'")
    return replace(config, fixed_anchors=True)


def lr_schedule(step, total_steps, base_lr, min_lr, warmup_frac=0.1):
    """Linear warmup over warmup_frac of the run, then cosine decay to min_lr"""
    warmup = int(warmup_frac * total_steps)
    if step < warmup:
        return base_lr * (step + 1) / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    progress = min(max(progress, 0.0), 1.0)
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ----------------------------------------------------------------------------
# state
# ----------------------------------------------------------------------------

@dataclass
class MetricsRecord:
    step: int
    loss_total: float
    loss_cls: float
    loss_patch: float
    teacher_entropy: float
    feature_std: float
    ema_m: float
    lr: float

    def as_row(self):
        return [self.step] + [repr(float(getattr(self, name))) for name in METRICS_HEADER[1:]]

    def is_finite(self):
        return all(math.isfinite(getattr(self, name)) for name in METRICS_HEADER[1:])


@dataclass
class TrainState:
    """Everything that evolves during training"""
    config: TrainConfig
    student: object
    teacher: object
    optimizer: AdamW
    bank_cls: object
    bank_patch: object
    step: int = 0
    baseline_cls: PrototypeBaseline = None
    baseline_patch: PrototypeBaseline = None
    fixed_cls_anchors: np.ndarray = None
    fixed_patch_anchors: np.ndarray = None


def init_train_state(config):
    """Fresh student/teacher pair, full random banks and (per mode) baselines"""
    seed = config.seed
    student = init_encoder(config.encoder_config(), derive_seed(seed, 'student'))
    teacher = student.copy(requires_grad=False)
    params = dict(student.params)
    no_decay = set(student.no_decay_names())

    baseline_cls = baseline_patch = None
    if config.train_mode is TrainMode.PARAMETRIC_BASELINE:
        baseline_cls = PrototypeBaseline.create(
            config.num_prototypes, config.d, derive_seed(seed, 'prototypes', 'cls'),
            center_momentum=config.center_momentum, centering=config.centering)
        baseline_patch = PrototypeBaseline.create(
            config.K_dot, config.d, derive_seed(seed, 'prototypes', 'patch'),
            center_momentum=config.center_momentum, centering=config.centering)
        params['baseline_cls.theta'] = baseline_cls.theta
        params['baseline_patch.theta'] = baseline_patch.theta
        no_decay.update({'baseline_cls.theta', 'baseline_patch.theta'})

    state = TrainState(
        config=config,
        student=student,
        teacher=teacher,
        optimizer=AdamW(params, lr=config.lr, weight_decay=config.weight_decay, no_decay=no_decay),
        bank_cls=init_bank(config.N_C, config.d, derive_seed(seed, 'bank', 'cls')),
        bank_patch=init_bank(config.N_p, config.d, derive_seed(seed, 'bank', 'patch')),
        baseline_cls=baseline_cls,
        baseline_patch=baseline_patch,
    )
    if config.fixed_anchors:
        rng = make_rng(seed, 'fixed_anchors')
        state.fixed_cls_anchors = np.stack(
            [state.bank_cls.sample_anchors(config.K, rng) for _ in range(max(1, config.tasks_cls))])
        state.fixed_patch_anchors = np.stack(
            [state.bank_patch.sample_anchors(config.K_dot, rng) for _ in range(max(1, config.tasks_mim))])
    return state


def state_footprint(state):
    """
    Bytes held by each part of a training state

    Keys: encoders (student + teacher), optimizer (AdamW moments, including
    those of learnable prototypes), memories (both FIFO banks) and
    prototypes (baseline weights, their EMA copies and centers).
    """
    def nbytes(arrays):
        return int(sum(np.asarray(a).nbytes for a in arrays))

    footprint = {
        'encoders': nbytes(state.student.arrays().values()) + nbytes(state.teacher.arrays().values()),
        'optimizer': nbytes(state.optimizer.m.values()) + nbytes(state.optimizer.v.values()),
        'memories': nbytes([state.bank_cls.storage, state.bank_patch.storage]),
        'prototypes': 0,
    }
    for baseline in (state.baseline_cls, state.baseline_patch):
        if baseline is not None:
            footprint['prototypes'] += nbytes([baseline.theta.data, baseline.teacher_theta, baseline.center])
    return footprint


# ----------------------------------------------------------------------------
# training step
# ----------------------------------------------------------------------------

@dataclass
class StepOutputs:
    """Losses of one forward pass plus the teacher outputs the step reuses"""
    loss_total: object
    loss_cls: object
    loss_patch: object
    teacher_cls: list
    teacher_patches: list
    teacher_entropy: float
    masks: list = field(default_factory=list)


def _scalar(value):
    return float(value.data) if hasattr(value, 'data') else float(value)


def _anchors(bank, fixed, task, K, rng):
    if fixed is not None:
        return fixed[task]
    return bank.sample_anchors(K, rng)


def forward_losses(state, batch, config, rng, tau_t):
    """
    Teacher and student forwards and the configured losses

    Draws, in order, the masks for both global views and then the anchors of
    every [CLS] task followed by every patch task from `rng`. Does not touch
    parameters or banks.
    """
    mode = config.train_mode
    B = batch.batch_size
    grid = config.image_size // config.patch_size
    feature_mode = config.global_feature

    with no_grad():
        teacher_out = [encode(state.teacher, view) for view in batch.global_views]
    teacher_cls = [pool_global(c, p, feature_mode).data for c, p in teacher_out]
    teacher_patches = [p.data for _, p in teacher_out]

    masks = []
    if config.uses_mim:
        masks = [np.stack([make_mask(config.mask_strategy, grid, config.mask_ratio, rng).mask
                           for _ in range(B)])
                 for _ in batch.global_views]

    loss_cls = 0.0
    loss_patch = 0.0
    entropies = []

    if config.uses_cls:
        student_views = list(batch.global_views) + list(batch.local_views)
        student_cls = []
        for view in student_views:
            cls, patches = encode(state.student, view)
            student_cls.append(pool_global(cls, patches, feature_mode))

        if mode is TrainMode.PARAMETRIC_BASELINE:
            baseline = state.baseline_cls
            loss_cls = parametric_cls_loss(student_cls, teacher_cls, baseline, config.tau_s, tau_t)
            center = baseline.center if baseline.centering else None
            entropies.append(mean_entropy(np.concatenate(
                [prototype_probs(t, baseline.teacher_theta, tau_t, center) for t in teacher_cls])))
        else:
            cls_mode = ContributionMode.parse(config.cls_contribution, config.smoothing)
            terms = []
            for task in range(config.tasks_cls):
                anchors = _anchors(state.bank_cls, state.fixed_cls_anchors, task, config.K, rng)
                sop = state.bank_cls.build_sop(anchors, config.k, cls_mode)
                teacher_probs = [sop_probs(t, sop, tau_t) for t in teacher_cls]
                student_probs = [sop_probs(u, sop, config.tau_s) for u in student_cls]
                terms.append(cls_loss(student_probs, teacher_probs))
                entropies.append(mean_entropy(np.concatenate(teacher_probs)))
            loss_cls = _mean(terms)

    if config.uses_mim:
        student_masked = [encode(state.student, view, masks=m)[1]
                          for view, m in zip(batch.global_views, masks)]
        if mode is TrainMode.PARAMETRIC_BASELINE:
            loss_patch = parametric_mim_loss(teacher_patches, student_masked, state.baseline_patch,
                                             masks, config.tau_s, tau_t)
        else:
            mim_mode = ContributionMode.parse(config.mim_contribution, config.smoothing)
            terms = []
            patch_entropies = []
            for task in range(config.tasks_mim):
                anchors = _anchors(state.bank_patch, state.fixed_patch_anchors, task, config.K_dot, rng)
                sop = state.bank_patch.build_sop(anchors, config.k_dot, mim_mode)
                teacher_probs = [sop_probs(t, sop, tau_t) for t in teacher_patches]
                student_probs = [sop_probs(z, sop, config.tau_s) for z in student_masked]
                terms.append(sop_mim_loss(teacher_probs, student_probs, masks))
                patch_entropies.append(mean_entropy(np.concatenate(teacher_probs)))
            loss_patch = _mean(terms)
            if not entropies:
                entropies = patch_entropies

    return StepOutputs(
        loss_total=total_loss(loss_cls, loss_patch, config.loss_weights()),
        loss_cls=loss_cls,
        loss_patch=loss_patch,
        teacher_cls=teacher_cls,
        teacher_patches=teacher_patches,
        teacher_entropy=float(np.mean(entropies)) if entropies else 0.0,
        masks=masks,
    )


def _mean(terms):
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (1.0 / len(terms))


def _push_teacher_embeddings(state, outputs, rng):
    """One teacher [CLS] row and one teacher patch row per image, from a random global view"""
    B = outputs.teacher_cls[0].shape[0]
    L = outputs.teacher_patches[0].shape[1]
    rows = np.arange(B)
    cls_view = rng.integers(0, len(outputs.teacher_cls), size=B)
    patch_view = rng.integers(0, len(outputs.teacher_patches), size=B)
    patch_pos = rng.integers(0, L, size=B)
    cls_stack = np.stack(outputs.teacher_cls)
    patch_stack = np.stack(outputs.teacher_patches)
    state.bank_cls.push(cls_stack[cls_view, rows])
    state.bank_patch.push(patch_stack[patch_view, rows, patch_pos])


def _diagnostics(state, outputs, lr, tau_t):
    return {
        'step': state.step,
        'loss_cls': _scalar(outputs.loss_cls),
        'loss_patch': _scalar(outputs.loss_patch),
        'teacher_entropy': outputs.teacher_entropy,
        'tau_t': tau_t,
        'lr': lr,
        'student_nonfinite': sorted(name for name, p in state.student.params.items()
                                    if not np.all(np.isfinite(p.data))),
        'teacher_feature_std': float(np.concatenate(outputs.teacher_cls).std(axis=0).mean()),
    }


def train_step(state, batch, config, rng=None):
    """
    One optimization step

    Order: teacher forward on the two global views, student forwards (all
    views plus the masked globals), [CLS] and patch SOP tasks, total loss,
    AdamW step on the student, EMA teacher update, then memory pushes.

    Args:
        state (TrainState): updated in place
        batch (ViewBatch): normalized views of the step's images
        config (TrainConfig): run configuration
        rng: numpy Generator; defaults to the stream keyed by (seed, step)

    Returns:
        tuple: (state, MetricsRecord)
    """
    step = state.step
    rng = rng if rng is not None else make_rng(config.seed, 'step', step)
    tau_t = teacher_temperature(step, config.steps, config.tau_t_warmup, config.tau_t, config.tau_t_warmup_frac)
    lr = lr_schedule(step, config.steps, config.lr, config.min_lr, config.warmup_frac)

    outputs = forward_losses(state, batch, config, rng, tau_t)
    loss_value = _scalar(outputs.loss_total)
    if not math.isfinite(loss_value):
        raise NonFiniteLoss(f"non-finite loss at step {step}", _diagnostics(state, outputs, lr, tau_t))

    state.optimizer.zero_grad()
    outputs.loss_total.backward()
    state.optimizer.step(lr)

    m = momentum_schedule(step, config.steps, config.m0)
    for baseline in (state.baseline_cls, state.baseline_patch):
        if baseline is not None:
            baseline.normalize_()
    if state.baseline_cls is not None:
        state.baseline_cls.update_center(outputs.teacher_cls)
        state.baseline_patch.update_center(outputs.teacher_patches)
        ema_arrays(state.baseline_cls.teacher_theta, state.baseline_cls.theta.data, m)
        ema_arrays(state.baseline_patch.teacher_theta, state.baseline_patch.theta.data, m)
    ema_update(state.teacher, state.student, m)

    if config.train_mode is not TrainMode.PARAMETRIC_BASELINE:
        _push_teacher_embeddings(state, outputs, rng)

    state.step = step + 1
    record = MetricsRecord(
        step=step,
        loss_total=loss_value,
        loss_cls=_scalar(outputs.loss_cls),
        loss_patch=_scalar(outputs.loss_patch),
        teacher_entropy=outputs.teacher_entropy,
        feature_std=float(np.concatenate(outputs.teacher_cls).std(axis=0).mean()),
        ema_m=m,
        lr=lr,
    )
    if not record.is_finite():
        raise NonFiniteLoss(f"non-finite metrics at step {step}", _diagnostics(state, outputs, lr, tau_t))
    return state, record


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def _state_arrays(state):
    arrays = {}
    for name, value in state.student.arrays().items():
        arrays[f'student.{name}'] = value
    for name, value in state.teacher.arrays().items():
        arrays[f'teacher.{name}'] = value
    for name, value in state.optimizer.state_dict()['arrays'].items():
        arrays[f'optim.{name}'] = value
    arrays['bank_cls'] = state.bank_cls.storage
    arrays['bank_patch'] = state.bank_patch.storage
    for tag in ('baseline_cls', 'baseline_patch'):
        baseline = getattr(state, tag)
        if baseline is not None:
            arrays[f'{tag}.theta'] = baseline.theta.data
            arrays[f'{tag}.teacher_theta'] = baseline.teacher_theta
            arrays[f'{tag}.center'] = baseline.center
    if state.fixed_cls_anchors is not None:
        arrays['fixed_cls_anchors'] = state.fixed_cls_anchors
        arrays['fixed_patch_anchors'] = state.fixed_patch_anchors
    return arrays


def save_checkpoint(state, path):
    """
    Write a checkpoint directory

    Layout: manifest.txt (key=value), config.json, and one little-endian
    float32 file per named array. The manifest is written last.
    """
    arrays = _state_arrays(state)
    manifest = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'config_hash': config_hash(state.config),
        'step': state.step,
        'seed': state.config.seed,
        'rng_state': f'derived:{state.config.seed}:step:{state.step}',
        'optimizer_t': state.optimizer.t,
        'bank_cls.cursor': state.bank_cls.cursor,
        'bank_cls.filled': state.bank_cls.filled,
        'bank_patch.cursor': state.bank_patch.cursor,
        'bank_patch.filled': state.bank_patch.filled,
    }
    for key, value in arrays.items():
        manifest[f'shape.{key}'] = ','.join(str(s) for s in np.shape(value))
    try:
        os.makedirs(path, exist_ok=True)
        for key, value in arrays.items():
            np.asarray(value).astype('<f4').tofile(os.path.join(path, f'{key}.f32'))
        save_config(state.config, os.path.join(path, 'config.json'))
        with open(os.path.join(path, 'manifest.txt'), 'w') as f:
            for key, value in manifest.items():
                f.write(f'{key}={value}\n')
    except OSError as e:
        raise IoError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug("checkpoint written to %s (step %d)", path, state.step)
    return path


def read_manifest(path):
    manifest_path = os.path.join(path, 'manifest.txt')
    if not os.path.isfile(manifest_path):
        raise CheckpointCorrupt(f"{path} has no manifest.txt")
    manifest = {}
    with open(manifest_path, 'r') as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if '=' not in line:
                raise CheckpointCorrupt(f"malformed manifest line '{line}'")
            key, value = line.split('=', 1)
            manifest[key] = value
    for key in ('format_version', 'config_hash', 'step'):
        if key not in manifest:
            raise CheckpointCorrupt(f"manifest is missing '{key}'")
    if manifest['format_version'] != str(CHECKPOINT_FORMAT_VERSION):
        raise CheckpointCorrupt(f"unsupported checkpoint format {manifest['format_version']}")
    return manifest


def _read_array(path, key, manifest):
    shape_text = manifest.get(f'shape.{key}')
    if shape_text is None:
        raise CheckpointCorrupt(f"manifest has no shape for '{key}'")
    shape = tuple(int(s) for s in shape_text.split(',') if s)
    file_path = os.path.join(path, f'{key}.f32')
    if not os.path.isfile(file_path):
        raise CheckpointCorrupt(f"missing array file {key}.f32")
    data = np.fromfile(file_path, dtype='<f4')
    if data.size != int(np.prod(shape)):
        raise CheckpointCorrupt(f"{key}.f32 holds {data.size} values, expected shape {shape}")
    return data.reshape(shape)


def load_checkpoint(path, config=None):
    """
    Rebuild a TrainState from a checkpoint directory

    Args:
        path (str): checkpoint directory
        config (TrainConfig, optional): when given, its hash must match the
            checkpoint's (ResumeMismatch otherwise); when omitted the
            checkpoint's own config.json is used
    """
    manifest = read_manifest(path)
    if config is None:
        try:
            config = load_config(os.path.join(path, 'config.json'))
        except (IoError, ConfigInvalid) as e:
            raise CheckpointCorrupt(f"checkpoint config unreadable: {e}") from e
    if config_hash(config) != manifest['config_hash']:
        logger.error("config hash %s does not match checkpoint %s", config_hash(config), manifest['config_hash'])
        raise ResumeMismatch("configuration differs from the one the checkpoint was written with")

    state = init_train_state(config)
    try:
        state.student.load_arrays({name: _read_array(path, f'student.{name}', manifest)
                                   for name in state.student.params})
        state.teacher.load_arrays({name: _read_array(path, f'teacher.{name}', manifest)
                                   for name in state.teacher.params})
        optim_arrays = {}
        for name in state.optimizer.params:
            optim_arrays[f'm.{name}'] = _read_array(path, f'optim.m.{name}', manifest)
            optim_arrays[f'v.{name}'] = _read_array(path, f'optim.v.{name}', manifest)
        state.optimizer.load_state_dict({'t': int(manifest['optimizer_t']), 'arrays': optim_arrays})

        for tag, bank in (('bank_cls', state.bank_cls), ('bank_patch', state.bank_patch)):
            bank.load_state_dict({
                'storage': _read_array(path, tag, manifest),
                'cursor': int(manifest[f'{tag}.cursor']),
                'filled': int(manifest[f'{tag}.filled']),
            })
        for tag in ('baseline_cls', 'baseline_patch'):
            baseline = getattr(state, tag)
            if baseline is not None:
                baseline.theta.data = _read_array(path, f'{tag}.theta', manifest).astype(baseline.theta.data.dtype)
                baseline.teacher_theta = _read_array(path, f'{tag}.teacher_theta', manifest).astype(
                    baseline.teacher_theta.dtype)
                baseline.center = _read_array(path, f'{tag}.center', manifest).astype(baseline.center.dtype)
        if config.fixed_anchors:
            state.fixed_cls_anchors = np.rint(_read_array(path, 'fixed_cls_anchors', manifest)).astype(np.int64)
            state.fixed_patch_anchors = np.rint(_read_array(path, 'fixed_patch_anchors', manifest)).astype(np.int64)
    except (KeyError, ValueError) as e:
        if isinstance(e, CheckpointCorrupt):
            raise
        logger.error("checkpoint %s is corrupt: %s", path, e)
        raise CheckpointCorrupt(f"checkpoint {path} is corrupt: {e}") from e

    state.step = int(manifest['step'])
    return state


# ----------------------------------------------------------------------------
# run loop
# ----------------------------------------------------------------------------

@dataclass
class RunResult:
    checkpoint: str
    metrics_path: str
    steps_run: int
    last_metrics: MetricsRecord = None


def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, 'checkpoints', f'step_{step:06d}')


def _prepare_metrics(path, resume_step):
    """Start a fresh metrics file, or keep only rows before resume_step"""
    kept = []
    if resume_step is not None and os.path.isfile(path):
        with open(path, 'r', newline='') as f:
            reader = csv.reader(f)
            next(reader, None)
            kept = [row for row in reader if row and int(row[0]) < resume_step]
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_HEADER)
        writer.writerows(kept)


def _write_dump(out_dir, error):
    dump_path = os.path.join(out_dir, 'nonfinite_dump.json')
    with open(dump_path, 'w') as f:
        json.dump({'message': str(error), 'diagnostics': error.diagnostics}, f, indent=2, default=str)
    logger.error("non-finite loss; diagnostics written to %s", dump_path)


def run(config, dataset, out_dir, resume=None, progress=False):
    """
    Train for config.steps steps

    Writes <out_dir>/metrics.csv every step and a checkpoint every
    checkpoint_every steps plus one at the end. With steps=0 only the
    initial checkpoint is written. Resuming continues the same step stream,
    so a split run reproduces an uninterrupted one.

    Args:
        config (TrainConfig): run configuration
        dataset (ImageDataset): training images
        out_dir (str): output directory (created if needed)
        resume (str, optional): checkpoint directory to continue from
        progress (bool): show a tqdm progress bar

    Returns:
        RunResult
    """
    if dataset.height != config.image_size or dataset.width != config.image_size:
        raise ConfigInvalid('image_size', f"dataset images are {dataset.height}x{dataset.width}")
    if dataset.channels != config.channels:
        raise ConfigInvalid('channels', f"dataset has {dataset.channels} channels")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create output directory {out_dir}: {e}") from e

    state = load_checkpoint(resume, config) if resume else init_train_state(config)
    metrics_path = os.path.join(out_dir, 'metrics.csv')
    start = state.step

    if resume and start >= config.steps:
        logger.info("checkpoint %s is already at step %d of %d", resume, start, config.steps)
        return RunResult(checkpoint=resume, metrics_path=metrics_path, steps_run=0)

    try:
        _prepare_metrics(metrics_path, start if resume else None)
    except OSError as e:
        raise IoError(f"cannot write metrics {metrics_path}: {e}") from e

    if config.steps == 0:
        path = save_checkpoint(state, checkpoint_path(out_dir, 0))
        return RunResult(checkpoint=path, metrics_path=metrics_path, steps_run=0)

    logger.info("training %s mode from step %d to %d", config.mode, start, config.steps)
    record = None
    last_saved = None
    prefetcher = BatchPrefetcher(dataset, config.batch_size, config.v_local, config.seed, start, config.steps,
                                 prefetch=config.prefetch, global_size=config.image_size,
                                 local_size=config.local_size)
    with prefetcher as batches, open(metrics_path, 'a', newline='') as metrics_file:
        writer = csv.writer(metrics_file)
        bar = tqdm(total=config.steps, initial=start, disable=not progress, desc='train')
        try:
            for step, batch in batches:
                try:
                    state, record = train_step(state, batch, config)
                except NonFiniteLoss as e:
                    _write_dump(out_dir, e)
                    raise
                writer.writerow(record.as_row())
                metrics_file.flush()
                bar.update(1)

                if config.log_every and step % config.log_every == 0:
                    logger.info("step %d loss %.4f (cls %.4f, patch %.4f) entropy %.3f lr %.2e",
                                step, record.loss_total, record.loss_cls, record.loss_patch,
                                record.teacher_entropy, record.lr)
                if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                    last_saved = save_checkpoint(state, checkpoint_path(out_dir, state.step))
        finally:
            bar.close()

    final = checkpoint_path(out_dir, state.step)
    if last_saved != final:
        save_checkpoint(state, final)
    return RunResult(checkpoint=final, metrics_path=metrics_path, steps_run=state.step - start,
                     last_metrics=record)
