"""End-to-end training: classification loss plus the three guidance losses,
SGD with momentum, per-group learning rates, per-epoch decay, and lossless
binary checkpoints.

Checkpoint format (magic "SPGC", version 1, little-endian):

    4s    magic b"SPGC"
    u32   format version
    u32   completed epochs
    u32   config json length, then that many utf-8 bytes (canonical json)
    32s   sha256 digest of the config json bytes
    u32   entry count
    per entry: u16 name length, name utf-8, u8 ndim, u32 per dimension
    payload: per entry, in order, the float32 values

Entries named "momentum/<param>" hold optimizer momentum buffers; all other
entries are model parameters keyed by their state-dict names.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch.nn import functional as F

from spg.core import Thresholds
from spg.guidance import GuidanceConfig, SupervisionSet, build_supervision_set, masked_bce_loss
from spg.model import NetworkConfig, NetworkOutputs, SpgNetwork, build_network, extract_attention

SPGC_MAGIC = b"SPGC"
SPGC_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 30
    base_lr: float = 0.001
    new_layer_lr: float = 0.01
    lr_decay_factor: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 0.0005
    aux_loss_weight: float = 1.0
    seed: int = 0
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    checkpoint_path: str | None = None
    log_path: str | None = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.base_lr <= 0 or self.new_layer_lr <= 0 or self.lr_decay_factor <= 0:
            raise ValueError("learning rates and decay factor must be > 0")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight decay must be >= 0")
        if self.aux_loss_weight < 0:
            raise ValueError("aux_loss_weight must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


def lr_for_epoch(base: float, decay_factor: float, epoch: int) -> float:
    """Learning rate during the given epoch: base / decay_factor**epoch."""
    return base * (1.0 / decay_factor) ** epoch


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffling order for an epoch; a pure function of (seed, epoch)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(epoch,)))
    return rng.permutation(n)


# ---------------------------------------------------------------- losses


def compute_total_loss(
    outputs: NetworkOutputs,
    labels: torch.Tensor,
    sup: SupervisionSet | None,
    aux_weight: float,
):
    """Classification cross-entropy plus weighted guidance losses.

    Returns (total, parts) where parts maps "cls", "b1", "b2", "c" to scalar
    tensors. With aux_weight 0 or without guidance outputs the total is the
    classification term alone.
    """
    cls = F.cross_entropy(outputs.logits, labels)
    zero = cls.detach() * 0.0
    if sup is None or aux_weight == 0.0 or outputs.f_b1 is None:
        return cls, {"cls": cls, "b1": zero, "b2": zero, "c": zero}
    m_a = _as_target(sup.m_a, outputs.f_b2)
    m_b2 = _as_target(sup.m_b2, outputs.f_b1)
    b2 = masked_bce_loss(outputs.f_b2, m_a)
    b1 = masked_bce_loss(outputs.f_b1, m_b2)
    if outputs.f_c is not None:
        c = masked_bce_loss(outputs.f_c, _as_target(sup.m_fuse, outputs.f_c))
    else:
        c = zero
    total = cls + aux_weight * (b1 + b2 + c)
    return total, {"cls": cls, "b1": b1, "b2": b2, "c": c}


def _as_target(mask, like: torch.Tensor) -> torch.Tensor:
    if isinstance(mask, torch.Tensor):
        return mask
    return torch.from_numpy(np.ascontiguousarray(mask)).to(like.device)


def build_supervision_batch(
    outputs: NetworkOutputs, labels: torch.Tensor, cfg: GuidanceConfig
) -> SupervisionSet:
    """Detach the current maps and build per-image supervision, stacked batchwise."""
    f_a4 = outputs.f_a4.detach().cpu().numpy()
    f_b1 = outputs.f_b1.detach().cpu().numpy()
    f_b2 = outputs.f_b2.detach().cpu().numpy()
    c_hw = tuple(outputs.f_c.shape[1:]) if outputs.f_c is not None else None
    y = labels.detach().cpu().numpy()
    m_a, m_b2, m_fuse = [], [], []
    for i in range(f_a4.shape[0]):
        att = extract_attention(f_a4[i], int(y[i]))
        s = build_supervision_set(
            att,
            f_b2[i],
            f_b1[i],
            cfg.seed_thresholds,
            cfg.stage_thresholds,
            cfg.fuse_thresholds,
            c_hw=c_hw,
            flat_seeds=cfg.flat_seeds,
        )
        m_a.append(s.m_a)
        m_b2.append(s.m_b2)
        m_fuse.append(s.m_fuse)
    return SupervisionSet(
        m_a=np.stack(m_a), m_b2=np.stack(m_b2), m_fuse=np.stack(m_fuse)
    )


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    epoch: int
    config_json: str

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.config_json.encode()).hexdigest()


def canonical_config_json(net_config: NetworkConfig, train_config: TrainConfig) -> str:
    """Stable serialization of everything that defines a run's trajectory.

    Run length (epochs) and output paths are excluded so a resumed run hashes
    the same as the original.
    """
    net = asdict(net_config)
    net["stem_blocks"] = [list(b) for b in net_config.stem_blocks]
    net["input_hw"] = list(net_config.input_hw)
    tr = asdict(train_config)
    for key in ("epochs", "checkpoint_path", "log_path"):
        tr.pop(key)
    return json.dumps({"network": net, "training": tr}, sort_keys=True, separators=(",", ":"))


def configs_from_checkpoint(ckpt: Checkpoint) -> tuple[NetworkConfig, TrainConfig]:
    """Rebuild the run's configuration from the json embedded in a checkpoint.

    The returned TrainConfig carries default epochs and paths; those were
    deliberately left out of the stored json.
    """
    d = json.loads(ckpt.config_json)
    net = dict(d["network"])
    net["input_hw"] = tuple(net["input_hw"])
    net["stem_blocks"] = tuple((int(c), bool(s)) for c, s in net["stem_blocks"])
    tr = dict(d["training"])
    g = tr.pop("guidance")
    guidance = GuidanceConfig(
        seed_thresholds=Thresholds(**g["seed_thresholds"]),
        stage_thresholds=Thresholds(**g["stage_thresholds"]),
        fuse_thresholds=Thresholds(**g["fuse_thresholds"]),
        flat_seeds=g["flat_seeds"],
    )
    return NetworkConfig(**net), TrainConfig(guidance=guidance, **tr)


def snapshot_checkpoint(
    model: SpgNetwork, optimizer: torch.optim.SGD, epoch: int, config_json: str
) -> Checkpoint:
    params = {
        name: p.detach().cpu().numpy().astype("<f4")
        for name, p in model.state_dict().items()
    }
    name_of = {id(p): name for name, p in model.named_parameters()}
    momentum = {}
    for group in optimizer.param_groups:
        for p in group["params"]:
            buf = optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                momentum[name_of[id(p)]] = buf.detach().cpu().numpy().astype("<f4")
    return Checkpoint(params=params, momentum=momentum, epoch=epoch, config_json=config_json)


def restore_training_state(model: SpgNetwork, optimizer: torch.optim.SGD, ckpt: Checkpoint):
    state = {name: torch.from_numpy(arr.copy()) for name, arr in ckpt.params.items()}
    model.load_state_dict(state)
    by_name = dict(model.named_parameters())
    for name, arr in ckpt.momentum.items():
        if name not in by_name:
            raise CheckpointError(f"momentum buffer for unknown parameter {name!r}")
        p = by_name[name]
        optimizer.state[p]["momentum_buffer"] = torch.from_numpy(arr.copy()).to(p.dtype)


def load_parameters(model: SpgNetwork, ckpt: Checkpoint) -> None:
    model.load_state_dict({n: torch.from_numpy(a.copy()) for n, a in ckpt.params.items()})


def warm_start_parameters(model: SpgNetwork, ckpt: Checkpoint) -> list[str]:
    """Copy every checkpoint parameter whose name and shape match the model.

    This is how guidance branches get attached to an already-trained
    classifier: the shared trunk carries over, branch layers keep their fresh
    initialization. Returns the names that were copied.
    """
    state = model.state_dict()
    copied = []
    for name, arr in ckpt.params.items():
        if name in state and tuple(state[name].shape) == tuple(arr.shape):
            state[name] = torch.from_numpy(arr.copy()).to(state[name].dtype)
            copied.append(name)
    if not copied:
        raise CheckpointError("warm start matched no parameters")
    model.load_state_dict(state)
    return copied


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    entries = dict(sorted(ckpt.params.items()))
    entries.update(sorted((f"momentum/{n}", a) for n, a in ckpt.momentum.items()))
    blob = bytearray()
    blob += SPGC_MAGIC
    blob += struct.pack("<II", SPGC_VERSION, ckpt.epoch)
    cfg = ckpt.config_json.encode()
    blob += struct.pack("<I", len(cfg)) + cfg
    blob += hashlib.sha256(cfg).digest()
    blob += struct.pack("<I", len(entries))
    for name, arr in entries.items():
        encoded = name.encode()
        blob += struct.pack("<H", len(encoded)) + encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for arr in entries.values():
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint: {what} missing at byte {pos}")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != SPGC_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, epoch = struct.unpack("<II", take(8, "header"))
    if version != SPGC_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    cfg_bytes = take(cfg_len, "config json")
    digest = take(32, "config hash")
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise CheckpointError("config hash mismatch: checkpoint corrupt")
    (n_entries,) = struct.unpack("<I", take(4, "entry count"))
    shapes: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(n_entries):
        (name_len,) = struct.unpack("<H", take(2, "entry name length"))
        name = take(name_len, "entry name").decode()
        (ndim,) = struct.unpack("<B", take(1, "entry rank"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, "entry shape"))
        shapes.append((name, dims))
    params: dict[str, np.ndarray] = {}
    momentum: dict[str, np.ndarray] = {}
    for name, dims in shapes:
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        arr = np.frombuffer(take(4 * count, f"payload of {name}"), dtype="<f4").reshape(dims)
        if name.startswith("momentum/"):
            momentum[name[len("momentum/") :]] = arr
        else:
            params[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after payload")
    return Checkpoint(params=params, momentum=momentum, epoch=epoch, config_json=cfg_bytes.decode())


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    model: SpgNetwork
    checkpoint: Checkpoint
    log_lines: list[str]


def _dataset_arrays(dataset):
    if isinstance(dataset, tuple):
        images, labels = dataset
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
    else:
        records = list(dataset)
        if not records:
            raise ValueError("dataset is empty")
        images = np.stack([r.pixels for r in records]).astype(np.float32)
        labels = np.array([r.label for r in records], dtype=np.int64)
    if images.ndim != 4 or images.shape[0] == 0 or images.shape[0] != labels.shape[0]:
        raise ValueError(f"bad dataset shapes: images {images.shape}, labels {labels.shape}")
    return images, labels


def train(
    net_config: NetworkConfig,
    config: TrainConfig,
    dataset,
    *,
    resume=None,
    warm_start=None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Run the stagewise-guidance training loop.

    Each step: forward; per-image attention for the ground-truth class; build
    the supervision set from the current maps; total loss; one SGD step.
    Learning rates drop by the decay factor after every epoch. Batch order is a
    pure function of (seed, epoch). `resume` continues from a checkpoint that
    must hash to the same configuration. `warm_start` instead copies matching
    parameters from a checkpoint (any configuration) and trains from epoch 0
    with fresh optimizer state, e.g. to attach guidance branches to a trained
    classifier.
    """
    config.validate()
    if resume is not None and warm_start is not None:
        raise ValueError("resume and warm_start are mutually exclusive")
    images, labels = _dataset_arrays(dataset)
    model = build_network(net_config, dtype=dtype)
    if warm_start is not None:
        ckpt = warm_start if isinstance(warm_start, Checkpoint) else load_checkpoint(warm_start)
        warm_start_parameters(model, ckpt)
    optimizer = torch.optim.SGD(
        [
            {"params": list(model.base_parameters()), "lr": config.base_lr},
            {"params": list(model.new_parameters()), "lr": config.new_layer_lr},
        ],
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    config_json = canonical_config_json(net_config, config)
    start_epoch = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        if ckpt.config_hash != hashlib.sha256(config_json.encode()).hexdigest():
            raise CheckpointError("checkpoint was produced by a different configuration")
        restore_training_state(model, optimizer, ckpt)
        start_epoch = ckpt.epoch
        if start_epoch > config.epochs:
            raise ValueError(f"checkpoint already at epoch {start_epoch} > budget {config.epochs}")

    x_all = torch.from_numpy(images.transpose(0, 3, 1, 2).copy()).to(dtype)
    y_all = torch.from_numpy(labels)
    n = x_all.shape[0]
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    step = start_epoch * steps_per_epoch
    log_lines: list[str] = []

    use_guidance = model.has_spg and config.aux_loss_weight > 0.0
    for epoch in range(start_epoch, config.epochs):
        lr_base = lr_for_epoch(config.base_lr, config.lr_decay_factor, epoch)
        lr_new = lr_for_epoch(config.new_layer_lr, config.lr_decay_factor, epoch)
        optimizer.param_groups[0]["lr"] = lr_base
        optimizer.param_groups[1]["lr"] = lr_new
        perm = epoch_permutation(config.seed, epoch, n)
        for b in range(steps_per_epoch):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            xb = x_all[torch.from_numpy(idx)]
            yb = y_all[torch.from_numpy(idx)]
            outputs = model(xb)
            sup = build_supervision_batch(outputs, yb, config.guidance) if use_guidance else None
            total, parts = compute_total_loss(outputs, yb, sup, config.aux_loss_weight)
            if not bool(torch.isfinite(total)):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (epoch {epoch}): "
                    + " ".join(f"{k}={float(v.detach()):g}" for k, v in parts.items())
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            log_lines.append(
                "\t".join(
                    [
                        str(step),
                        str(epoch),
                        repr(lr_base),
                        repr(float(total.detach())),
                        repr(float(parts["cls"].detach())),
                        repr(float(parts["b1"].detach())),
                        repr(float(parts["b2"].detach())),
                        repr(float(parts["c"].detach())),
                    ]
                )
            )
            step += 1

    ckpt = snapshot_checkpoint(model, optimizer, config.epochs, config_json)
    if config.checkpoint_path:
        save_checkpoint(ckpt, config.checkpoint_path)
    if config.log_path:
        with open(config.log_path, "w") as fh:
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))
    return TrainResult(model=model, checkpoint=ckpt, log_lines=log_lines)
