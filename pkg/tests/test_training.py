import hashlib

import numpy as np
import pytest
import torch

from spg.guidance import EPS, GuidanceConfig, IGNORED
from spg.model import NetworkConfig, build_network
from spg.training import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    build_supervision_batch,
    canonical_config_json,
    compute_total_loss,
    epoch_permutation,
    load_checkpoint,
    lr_for_epoch,
    save_checkpoint,
    snapshot_checkpoint,
    train,
    warm_start_parameters,
)


def tiny_config(**overrides) -> NetworkConfig:
    base = dict(
        input_hw=(16, 16),
        num_classes=2,
        stem_blocks=((4, True),),
        a1_channels=4,
        a2_channels=6,
        a3_channels=8,
        b_adapter_filters=4,
        b_shared_filters=4,
        c_head_filters=4,
        init_seed=3,
    )
    base.update(overrides)
    return NetworkConfig(**base)


def toy_dataset(n=12, hw=(16, 16), seed=0):
    """Two trivially separable classes: red-heavy vs green-heavy noise."""
    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 0.3, size=(n, hw[0], hw[1], 3)).astype(np.float32)
    labels = np.arange(n, dtype=np.int64) % 2
    for i in range(n):
        images[i, :, :, labels[i]] += 0.6
    return images, labels


def batch_for(model, images, labels):
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
    y = torch.from_numpy(labels)
    return model(x), y


# ---------------------------------------------------------------- loss assembly


def test_plain_network_loss_is_pure_cross_entropy():
    model = build_network(tiny_config(enable_spg=False))
    images, labels = toy_dataset(4)
    outputs, y = batch_for(model, images, labels)
    total, parts = compute_total_loss(outputs, y, None, 1.0)
    expected = torch.nn.functional.cross_entropy(outputs.logits, y)
    assert torch.equal(total, expected)
    assert float(parts["b1"]) == 0.0 and float(parts["b2"]) == 0.0 and float(parts["c"]) == 0.0


def test_zero_aux_weight_equals_cross_entropy():
    model = build_network(tiny_config())
    images, labels = toy_dataset(4)
    outputs, y = batch_for(model, images, labels)
    sup = build_supervision_batch(outputs, y, GuidanceConfig())
    total, parts = compute_total_loss(outputs, y, sup, 0.0)
    expected = torch.nn.functional.cross_entropy(outputs.logits, y)
    assert torch.equal(total, expected)


def bce_oracle(pred: np.ndarray, target: np.ndarray) -> float:
    valid = target != IGNORED
    if not valid.any():
        return 0.0
    p = pred[valid].astype(np.float64)
    t = target[valid].astype(np.float64)
    per = -(t * np.log(p + EPS) + (1.0 - t) * np.log(1.0 - p + EPS))
    return float(per.mean())


def test_loss_breakdown_matches_hand_computation():
    model = build_network(tiny_config())
    images, labels = toy_dataset(6)
    outputs, y = batch_for(model, images, labels)
    sup = build_supervision_batch(outputs, y, GuidanceConfig())
    alpha = 0.7
    total, parts = compute_total_loss(outputs, y, sup, alpha)

    want_b2 = bce_oracle(outputs.f_b2.detach().numpy(), sup.m_a)
    want_b1 = bce_oracle(outputs.f_b1.detach().numpy(), sup.m_b2)
    want_c = bce_oracle(outputs.f_c.detach().numpy(), sup.m_fuse)
    got = {k: float(v.detach()) for k, v in parts.items()}
    assert got["b2"] == pytest.approx(want_b2, rel=1e-6)
    assert got["b1"] == pytest.approx(want_b1, rel=1e-6)
    assert got["c"] == pytest.approx(want_c, rel=1e-6)
    want_total = got["cls"] + alpha * (want_b1 + want_b2 + want_c)
    assert float(total.detach()) == pytest.approx(want_total, rel=1e-6)


def test_breakdown_sums_to_total():
    model = build_network(tiny_config())
    images, labels = toy_dataset(5)
    outputs, y = batch_for(model, images, labels)
    sup = build_supervision_batch(outputs, y, GuidanceConfig())
    for alpha in (0.0, 0.3, 1.0):
        total, parts = compute_total_loss(outputs, y, sup, alpha)
        got = {k: float(v.detach()) for k, v in parts.items()}
        recon = got["cls"] + alpha * (got["b1"] + got["b2"] + got["c"])
        assert abs(float(total.detach()) - recon) < 1e-6


def test_no_c_head_drops_c_term():
    model = build_network(tiny_config(enable_c=False))
    images, labels = toy_dataset(4)
    outputs, y = batch_for(model, images, labels)
    sup = build_supervision_batch(outputs, y, GuidanceConfig())
    total, parts = compute_total_loss(outputs, y, sup, 1.0)
    assert float(parts["c"].detach()) == 0.0
    assert float(parts["b1"].detach()) > 0.0 and float(parts["b2"].detach()) > 0.0


def test_zero_aux_weight_gives_branches_no_gradient():
    model = build_network(tiny_config())
    images, labels = toy_dataset(4)
    outputs, y = batch_for(model, images, labels)
    sup = build_supervision_batch(outputs, y, GuidanceConfig())
    total, _ = compute_total_loss(outputs, y, sup, 0.0)
    total.backward()
    for mod in (model.b1_adapter, model.b2_adapter, model.b1_mid, model.b1_out, model.c_mid, model.c_out):
        assert mod.weight.grad is None
        assert mod.bias.grad is None
    assert model.a4.weight.grad is not None


def test_supervision_batch_is_detached():
    model = build_network(tiny_config())
    images, labels = toy_dataset(3)
    outputs, y = batch_for(model, images, labels)
    sup = build_supervision_batch(outputs, y, GuidanceConfig())
    for arr in (sup.m_a, sup.m_b2, sup.m_fuse):
        assert isinstance(arr, np.ndarray)
        assert arr.dtype == np.uint8
        assert arr.shape[0] == 3


# ---------------------------------------------------------------- gradients


def test_total_loss_gradient_matches_finite_differences():
    torch.manual_seed(0)
    model = build_network(tiny_config(), dtype=torch.float64)
    images, labels = toy_dataset(2)
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy()).double()
    y = torch.from_numpy(labels)
    with torch.no_grad():
        frozen = build_supervision_batch(model(x), y, GuidanceConfig())

    def loss_now() -> torch.Tensor:
        total, _ = compute_total_loss(model(x), y, frozen, 1.0)
        return total

    loss = loss_now()
    model.zero_grad()
    loss.backward()

    rng = np.random.default_rng(7)
    h = 1e-6
    params = dict(model.named_parameters())
    names = sorted(params)
    checked = 0
    for name in rng.choice(names, size=min(10, len(names)), replace=False):
        p = params[name]
        flat = p.detach().reshape(-1)
        i = int(rng.integers(flat.numel()))
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
        with torch.no_grad():
            orig = float(flat[i])
            flat[i] = orig + h
            up = float(loss_now())
            flat[i] = orig - h
            down = float(loss_now())
            flat[i] = orig
        numeric = (up - down) / (2 * h)
        scale = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / scale < 1e-3, (name, i, analytic, numeric)
        checked += 1
    assert checked >= 8


# ---------------------------------------------------------------- schedule and shuffling


def test_learning_rate_decays_tenfold_per_epoch():
    assert lr_for_epoch(0.001, 10.0, 0) == 0.001
    assert lr_for_epoch(0.001, 10.0, 1) == pytest.approx(1e-4, rel=1e-12)
    assert lr_for_epoch(0.001, 10.0, 2) == pytest.approx(1e-5, rel=1e-12)
    assert lr_for_epoch(0.01, 10.0, 3) == pytest.approx(1e-5, rel=1e-12)
    assert lr_for_epoch(0.5, 1.0, 9) == 0.5


def test_epoch_permutation_is_reproducible_and_epoch_dependent():
    a = epoch_permutation(11, 0, 40)
    b = epoch_permutation(11, 0, 40)
    c = epoch_permutation(11, 1, 40)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert sorted(a.tolist()) == list(range(40))


# ---------------------------------------------------------------- training loop


def test_training_overfits_separable_toy_set():
    images, labels = toy_dataset(12)
    cfg = TrainConfig(
        epochs=8,
        batch_size=4,
        base_lr=0.02,
        new_layer_lr=0.05,
        lr_decay_factor=1.0,
        seed=5,
    )
    result = train(tiny_config(), cfg, (images, labels))
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
    with torch.no_grad():
        pred = result.model(x).logits.argmax(dim=1).numpy()
    assert (pred == labels).mean() >= 11 / 12
    assert len(result.log_lines) == 8 * 3
    first = result.log_lines[0].split("\t")
    assert first[0] == "0" and first[1] == "0" and float(first[2]) == 0.02
    assert len(first) == 8


def test_training_is_bitwise_deterministic():
    images, labels = toy_dataset(8)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=9)
    a = train(tiny_config(), cfg, (images, labels))
    b = train(tiny_config(), cfg, (images, labels))
    assert a.log_lines == b.log_lines
    assert a.checkpoint.params.keys() == b.checkpoint.params.keys()
    for name in a.checkpoint.params:
        assert np.array_equal(a.checkpoint.params[name], b.checkpoint.params[name]), name
    for name in a.checkpoint.momentum:
        assert np.array_equal(a.checkpoint.momentum[name], b.checkpoint.momentum[name]), name


def test_plain_training_leaves_branch_weights_at_init():
    images, labels = toy_dataset(8)
    cfg = TrainConfig(epochs=1, batch_size=4, aux_loss_weight=0.0, seed=1)
    result = train(tiny_config(), cfg, (images, labels))
    fresh = build_network(tiny_config())
    for mod_name in ("b1_adapter", "b2_adapter", "c_mid", "c_out"):
        trained = getattr(result.model, mod_name).weight
        initial = getattr(fresh, mod_name).weight
        assert torch.equal(trained, initial), mod_name


def test_divergence_raises():
    images, labels = toy_dataset(8)
    cfg = TrainConfig(
        epochs=2,
        batch_size=4,
        base_lr=1e12,
        new_layer_lr=1e12,
        weight_decay=0.0,
        aux_loss_weight=0.0,
        seed=2,
    )
    with pytest.raises(TrainingDiverged):
        train(tiny_config(enable_spg=False), cfg, (images, labels))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(base_lr=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(aux_loss_weight=-0.5).validate()
    with pytest.raises(ValueError):
        TrainConfig(seed=-1).validate()


# ---------------------------------------------------------------- checkpoints


def trained_checkpoint(tmp_path, epochs=1):
    images, labels = toy_dataset(8)
    cfg = TrainConfig(epochs=epochs, batch_size=4, seed=4, checkpoint_path=str(tmp_path / "run.spgc"))
    result = train(tiny_config(), cfg, (images, labels))
    return result, cfg, tmp_path / "run.spgc"


def test_checkpoint_round_trip_is_bitwise(tmp_path):
    result, cfg, path = trained_checkpoint(tmp_path)
    loaded = load_checkpoint(path)
    assert loaded.epoch == 1
    assert loaded.config_json == result.checkpoint.config_json
    assert loaded.params.keys() == result.checkpoint.params.keys()
    for name, arr in result.checkpoint.params.items():
        assert arr.dtype == np.dtype("<f4")
        assert np.array_equal(loaded.params[name], arr), name
    assert loaded.momentum.keys() == result.checkpoint.momentum.keys()
    for name, arr in result.checkpoint.momentum.items():
        assert np.array_equal(loaded.momentum[name], arr), name
    # Saving what was loaded reproduces the file byte for byte.
    save_checkpoint(loaded, tmp_path / "again.spgc")
    assert (tmp_path / "again.spgc").read_bytes() == path.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.spgc"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_truncation_everywhere(tmp_path):
    _, _, path = trained_checkpoint(tmp_path)
    data = path.read_bytes()
    bad = tmp_path / "cut.spgc"
    for cut in (2, 10, 40, len(data) // 2, len(data) - 3):
        bad.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_checkpoint_rejects_trailing_bytes(tmp_path):
    _, _, path = trained_checkpoint(tmp_path)
    bad = tmp_path / "long.spgc"
    bad.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_checkpoint_rejects_corrupt_config(tmp_path):
    _, _, path = trained_checkpoint(tmp_path)
    data = bytearray(path.read_bytes())
    data[20] ^= 0xFF  # inside the config json
    bad = tmp_path / "flip.spgc"
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)


def test_resume_matches_uninterrupted_run(tmp_path):
    images, labels = toy_dataset(8)
    net = tiny_config()
    full_cfg = TrainConfig(epochs=2, batch_size=4, seed=4)
    full = train(net, full_cfg, (images, labels))

    half_cfg = TrainConfig(epochs=1, batch_size=4, seed=4, checkpoint_path=str(tmp_path / "half.spgc"))
    train(net, half_cfg, (images, labels))
    rest = train(net, full_cfg, (images, labels), resume=str(tmp_path / "half.spgc"))

    assert rest.checkpoint.epoch == full.checkpoint.epoch == 2
    for name, arr in full.checkpoint.params.items():
        assert np.array_equal(rest.checkpoint.params[name], arr), name
    for name, arr in full.checkpoint.momentum.items():
        assert np.array_equal(rest.checkpoint.momentum[name], arr), name
    # Log continues with the right step and epoch numbering.
    assert rest.log_lines == full.log_lines[2:]


def test_resume_rejects_different_configuration(tmp_path):
    _, cfg, path = trained_checkpoint(tmp_path)
    images, labels = toy_dataset(8)
    other = TrainConfig(epochs=2, batch_size=4, seed=99)
    with pytest.raises(CheckpointError):
        train(tiny_config(), other, (images, labels), resume=str(path))


def test_warm_start_copies_matching_params_and_keeps_fresh_branches():
    images, labels = toy_dataset(8)
    plain = train(tiny_config(enable_spg=False), TrainConfig(epochs=1, batch_size=4, seed=4), (images, labels))
    ckpt = plain.checkpoint

    model = build_network(tiny_config())
    fresh = {n: p.detach().clone() for n, p in model.state_dict().items()}
    copied = warm_start_parameters(model, ckpt)
    assert set(copied) == set(ckpt.params)
    state = model.state_dict()
    for name, arr in ckpt.params.items():
        assert np.array_equal(state[name].numpy(), arr), name
    for name in set(state) - set(ckpt.params):
        assert torch.equal(state[name], fresh[name]), name


def test_warm_start_training_restarts_at_epoch_zero():
    images, labels = toy_dataset(8)
    plain = train(tiny_config(enable_spg=False), TrainConfig(epochs=2, batch_size=4, seed=4), (images, labels))
    res = train(
        tiny_config(),
        TrainConfig(epochs=1, batch_size=4, seed=4, aux_loss_weight=1.0),
        (images, labels),
        warm_start=plain.checkpoint,
    )
    assert res.checkpoint.epoch == 1
    assert res.log_lines[0].split("\t")[:2] == ["0", "0"]


def test_warm_start_and_resume_are_mutually_exclusive(tmp_path):
    _, _, path = trained_checkpoint(tmp_path)
    images, labels = toy_dataset(8)
    cfg = TrainConfig(epochs=2, batch_size=4, seed=4)
    with pytest.raises(ValueError):
        train(tiny_config(), cfg, (images, labels), resume=str(path), warm_start=str(path))


def test_warm_start_with_no_overlap_is_an_error():
    bogus = Checkpoint(
        params={"nope.weight": np.zeros((2, 2), dtype="<f4")},
        momentum={},
        epoch=1,
        config_json="{}",
    )
    with pytest.raises(CheckpointError):
        warm_start_parameters(build_network(tiny_config()), bogus)


def test_config_json_ignores_run_length_and_paths():
    net = tiny_config()
    a = canonical_config_json(net, TrainConfig(epochs=1, checkpoint_path="x", log_path="y"))
    b = canonical_config_json(net, TrainConfig(epochs=7))
    assert a == b
    c = canonical_config_json(net, TrainConfig(epochs=7, seed=1))
    assert a != c
    d = canonical_config_json(tiny_config(init_seed=4), TrainConfig(epochs=7))
    assert a != d
