import numpy as np
import pytest

from petl_lab import (ConfigError, OptimizerConfig, ParameterRegistry, PETLSpec,
                      Tensor, attach_petl, build_model, build_swin_bapat,
                      cross_entropy, evaluate, freeze_backbone, grad_check,
                      make_dataset, train)
from petl_lab import tensor as tensor_mod
from petl_lab import tensor as T
from petl_lab.harness import make_optimizer

from conftest import TINY


# -- synthetic dataset ------------------------------------------------------------


def test_dataset_regeneration_is_bitwise_identical():
    a = make_dataset(4, 8, (4, 16, 16), seed=123)
    b = make_dataset(4, 8, (4, 16, 16), seed=123)
    assert a.clips.tobytes() == b.clips.tobytes()
    assert np.array_equal(a.labels, b.labels)
    c = make_dataset(4, 8, (4, 16, 16), seed=124)
    assert a.clips.tobytes() != c.clips.tobytes()


def test_dataset_balance_and_shapes():
    ds = make_dataset(4, 32, (8, 32, 32), seed=0)
    assert len(ds) == 128
    assert ds.clips.shape == (128, 8, 32, 32, 3)
    counts = np.bincount(ds.labels, minlength=4)
    assert np.array_equal(counts, [32, 32, 32, 32])


def test_dataset_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        make_dataset(0, 4, (4, 8, 8), seed=0)


def motion_features(clip):
    """Least-squares optical-flow drift plus a texture-frequency proxy."""
    g = clip.mean(axis=-1)
    gx = np.gradient(g, axis=2)
    gy = np.gradient(g, axis=1)
    gt = np.gradient(g, axis=0)
    a = np.array([[np.sum(gx * gx), np.sum(gx * gy)],
                  [np.sum(gx * gy), np.sum(gy * gy)]])
    b = -np.array([np.sum(gx * gt), np.sum(gy * gt)])
    flow = np.linalg.solve(a + 1e-9 * np.eye(2), b)
    return np.array([flow[0], flow[1], np.mean(np.abs(gx)) + np.mean(np.abs(gy))])


def test_classes_recoverable_from_motion_statistics():
    # nearest-centroid on hand-written motion features beats chance by a margin
    ds = make_dataset(4, 16, (8, 16, 16), seed=7)
    feats = np.stack([motion_features(c) for c in ds.clips])
    train_mask = np.arange(len(ds)) % 2 == 0
    centroids = np.stack([feats[train_mask & (ds.labels == c)].mean(axis=0)
                          for c in range(4)])
    test_feats = feats[~train_mask]
    test_labels = ds.labels[~train_mask]
    preds = np.argmin(((test_feats[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    accuracy = (preds == test_labels).mean()
    assert accuracy > 0.5  # chance is 0.25


# -- evaluate -----------------------------------------------------------------------


class OracleModel:
    """Emits the one-hot of the true label (looked up by clip identity)."""

    def __init__(self, dataset, n_classes):
        self.table = {ds_clip.tobytes(): int(label)
                      for ds_clip, label in zip(dataset.clips, dataset.labels)}
        self.n = n_classes

    def forward(self, clip):
        onehot = np.zeros(self.n)
        onehot[self.table[np.asarray(clip).tobytes()]] = 1.0
        return Tensor(onehot)


class ConstantModel:
    def __init__(self, n_classes):
        self.n = n_classes

    def forward(self, clip):
        return Tensor(np.zeros(self.n))


def test_evaluate_perfect_model_is_one():
    ds = make_dataset(3, 4, (2, 8, 8), seed=1)
    assert evaluate(OracleModel(ds, 3), ds) == 1.0


def test_evaluate_constant_model_ties_to_lowest_index():
    ds = make_dataset(4, 8, (2, 8, 8), seed=2)
    assert evaluate(ConstantModel(4), ds) == pytest.approx(1 / 4)


def test_evaluate_matches_scripted_accuracy(rng):
    model = build_model(TINY, seed=3)
    ds = make_dataset(3, 4, TINY.input_size, seed=3)
    got = evaluate(model, ds)
    with T.no_grad():
        logits = np.stack([model.forward(c).data for c in ds.clips])
    scripted = float((logits.argmax(axis=1) == ds.labels).mean())
    assert got == scripted


# -- training ----------------------------------------------------------------------


def _head_only_model(seed=0, cfg=TINY):
    model = build_model(cfg, seed=seed)
    spec = PETLSpec(mechanisms=(), tune_head=True)
    freeze_backbone(model, spec)
    return model


def test_zero_lr_changes_nothing():
    model = _head_only_model(seed=4)
    before = {p.path: p.tensor.data.copy() for p in model.registry}
    ds = make_dataset(1, 1, TINY.input_size, seed=4)  # one clip: fixed batch
    hist = train(model, ds, OptimizerConfig(lr=0.0, steps=5, batch_size=2), seed=4)
    for p in model.registry:
        assert p.tensor.data.tobytes() == before[p.path].tobytes(), p.path
    assert len(set(hist.losses)) == 1  # constant loss on the constant batch


def test_training_reduces_loss():
    from petl_lab import SWIN_MICRO
    model = build_swin_bapat(SWIN_MICRO, d_bottle=8, s=0.8, tune_head=True, seed=5)
    freeze_backbone(model, model.petl_spec)
    ds = make_dataset(4, 8, SWIN_MICRO.input_size, seed=5)
    hist = train(model, ds, OptimizerConfig(lr=1e-3, steps=25, batch_size=8), seed=5)
    assert hist.losses[-1] < hist.losses[0]
    assert hist.trainable_count == sum(
        p.count for p in model.registry if not p.frozen)


def test_frozen_tensors_bitwise_constant_through_training():
    spec = PETLSpec(mechanisms=("adapter_parallel", "patt"), d_bottle=2,
                    tune_head=True)
    model = build_model(TINY, seed=6)
    attach_petl(model, spec, seed=7)
    freeze_backbone(model, spec)
    frozen_before = {p.path: p.tensor.data.copy() for p in model.registry if p.frozen}
    ds = make_dataset(3, 4, TINY.input_size, seed=6)
    train(model, ds, OptimizerConfig(lr=1e-2, steps=10, batch_size=4), seed=6)
    changed = [p.path for p in model.registry
               if not p.frozen and ".petl." in p.path
               and p.tensor.data.tobytes() != b""]
    for p in model.registry:
        if p.frozen:
            assert p.tensor.data.tobytes() == frozen_before[p.path].tobytes(), p.path
    assert changed  # training actually moved the inserts


def test_training_is_deterministic():
    def run():
        model = _head_only_model(seed=8)
        ds = make_dataset(3, 4, TINY.input_size, seed=8)
        return train(model, ds, OptimizerConfig(lr=1e-3, steps=8, batch_size=4),
                     seed=8)
    a, b = run(), run()
    assert a.losses == b.losses
    assert a.evals[-1][1] == b.evals[-1][1]


def test_training_needs_trainable_parameters():
    model = build_model(TINY, seed=9)
    freeze_backbone(model, PETLSpec(mechanisms=(), tune_head=False))
    ds = make_dataset(3, 2, TINY.input_size, seed=9)
    with pytest.raises(ConfigError):
        train(model, ds, OptimizerConfig(steps=1, batch_size=1), seed=9)


def test_s_zero_training_equals_head_only_exactly():
    # zero-scaled inserts receive zero gradients, so the whole run matches
    # head-only tuning bit for bit
    ds = make_dataset(3, 4, TINY.input_size, seed=10)
    opt = OptimizerConfig(lr=1e-3, steps=6, batch_size=4)

    head_only = _head_only_model(seed=10)
    hist_head = train(head_only, ds, opt, seed=10)

    bapat = build_swin_bapat(TINY, d_bottle=2, s=0.0, tune_head=True, seed=10)
    freeze_backbone(bapat, bapat.petl_spec)
    hist_bapat = train(bapat, ds, opt, seed=10)

    assert hist_head.losses == hist_bapat.losses
    head_w = head_only.registry.get("head.weight").tensor.data
    assert head_w.tobytes() == bapat.registry.get("head.weight").tensor.data.tobytes()


def test_bapat_capacity_at_least_head_only():
    ds = make_dataset(4, 8, (8, 32, 32), seed=11)
    opt = OptimizerConfig(lr=2e-3, steps=30, batch_size=8)
    from petl_lab import SWIN_MICRO

    head_only = _head_only_model(seed=11, cfg=SWIN_MICRO)
    top_head = train(head_only, ds, opt, seed=11).final_train_top1

    bapat = build_swin_bapat(SWIN_MICRO, d_bottle=8, s=0.8, tune_head=True, seed=11)
    freeze_backbone(bapat, bapat.petl_spec)
    top_bapat = train(bapat, ds, opt, seed=11).final_train_top1

    assert top_bapat >= top_head


def test_history_csv(tmp_path):
    model = _head_only_model(seed=12)
    ds = make_dataset(3, 2, TINY.input_size, seed=12)
    hist = train(model, ds, OptimizerConfig(lr=1e-3, steps=3, batch_size=2), seed=12)
    path = tmp_path / "history.csv"
    hist.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss"
    assert len(lines) == 4
    assert float(lines[1].split(",")[1]) == hist.losses[0]


# -- optimizers ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["sgd", "sgd-momentum", "adam"])
def test_optimizers_apply_updates(kind, rng):
    reg = ParameterRegistry()
    t = Tensor(rng.normal(size=4), requires_grad=True)
    p = reg.register("w", t)
    opt = make_optimizer(OptimizerConfig(kind=kind, lr=0.1))
    before = t.data.copy()
    t.grad = np.ones(4)
    opt.step([p])
    assert not np.array_equal(t.data, before)
    t.grad = None
    moved = t.data.copy()
    opt.step([p])  # no grad: no movement
    assert np.array_equal(t.data, moved)


def test_unknown_optimizer_rejected():
    with pytest.raises(ConfigError):
        make_optimizer(OptimizerConfig(kind="rmsprop"))


def test_optimizer_validation():
    with pytest.raises(ConfigError):
        OptimizerConfig(lr=-1.0).validate()
    with pytest.raises(ConfigError):
        OptimizerConfig(batch_size=0).validate()


# -- gradient checking -----------------------------------------------------------


class LinearProbe:
    """Logits are an exactly linear map of the flattened clip."""

    def __init__(self, in_dim, n_classes, seed):
        rng = np.random.default_rng(seed)
        self.registry = ParameterRegistry()
        self.w = Tensor(rng.normal(scale=0.1, size=(in_dim, n_classes)),
                        requires_grad=True)
        self.b = Tensor(np.zeros(n_classes), requires_grad=True)
        self.registry.register("probe.weight", self.w)
        self.registry.register("probe.bias", self.b)

    def forward(self, clip):
        x = Tensor(np.asarray(clip).reshape(1, -1))
        return T.reshape(T.add(T.matmul(x, self.w), self.b), (self.b.size,))

    def zero_grads(self):
        for p in self.registry:
            p.tensor.zero_grad()


def test_grad_check_linear_model():
    # inputs bounded away from zero keep every weight's gradient healthy,
    # so the oracle's rounding noise stays far below the 1e-8 bar
    rng = np.random.default_rng(13)
    u = rng.normal(size=(2, 96))
    clips = np.sign(u) * (0.5 + np.abs(u))
    model = LinearProbe(96, 3, seed=13)
    err = grad_check(model, clips, np.array([0, 2]), eps=1e-5)
    assert err < 1e-8


def test_grad_check_param_limit():
    model = LinearProbe(60_000, 3, seed=14)
    with pytest.raises(ConfigError):
        grad_check(model, np.zeros((1, 60_000)), np.array([0]))


def _tiny_petl_model(seed=15):
    spec = PETLSpec(mechanisms=("prefix", "patt"), d_bottle=2, d_token=2,
                    d_middle=2, tune_head=False)
    model = build_model(TINY, seed=seed)
    attach_petl(model, spec, seed=seed + 1)
    freeze_backbone(model, spec)
    r = np.random.default_rng(seed + 2)
    for p in model.registry:
        if not p.frozen:
            p.tensor.data[...] = r.normal(scale=0.1, size=p.shape)
    return model


def test_grad_check_detects_corrupted_backward(monkeypatch):
    model = _tiny_petl_model()
    ds = make_dataset(3, 1, TINY.input_size, seed=15)
    baseline = grad_check(model, ds.clips[:1], ds.labels[:1], eps=1e-5)
    assert baseline < 1e-4

    original = tensor_mod.tanh

    def corrupted_tanh(t):
        data = np.tanh(t.data)

        def backward_fn(g):
            if t.requires_grad:
                t._accum_grad(g * (1.0 - data * data) * 1.25)  # wrong by 25%

        return tensor_mod._make_op(data, (t,), backward_fn, "tanh")

    monkeypatch.setattr(tensor_mod, "tanh", corrupted_tanh)
    model = _tiny_petl_model()
    corrupted = grad_check(model, ds.clips[:1], ds.labels[:1], eps=1e-5)
    assert corrupted > 1e-2, f"fault injection went undetected: {corrupted:.3e}"
