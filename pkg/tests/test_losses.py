"""Loss-term formulas, gradient routing, zero-coefficient elision, presets."""

import numpy as np
import pytest

from i2iadapt import autodiff as ad
from i2iadapt.autodiff import Tape, Tensor, backward
from i2iadapt.data import DomainBatch
from i2iadapt.losses import (
    LambdaConfig, RoutingRules, critic_losses, gradient_penalty, preset,
    preset_table, q_classification, q_cycle, q_feature_adversarial, q_identity,
    q_total, q_translated_classification, q_translation_adversarial,
    translation_critic_losses,
)
from i2iadapt.models import build_bundle


def _point_batch(rng, n=8, classes=4, labels=True):
    imgs = rng.uniform(-1, 1, size=(n, 2)).astype(np.float32)
    lab = rng.integers(0, classes, size=n) if labels else None
    return DomainBatch(images=Tensor(imgs), labels=lab, domain="source" if labels else "target")


@pytest.fixture()
def mlp():
    return build_bundle("mlp", num_classes=4, seed=0)


@pytest.fixture()
def batches():
    rng = np.random.default_rng(0)
    return _point_batch(rng, labels=True), _point_batch(rng, labels=False)


class _ConstCritic:
    """Stub bundle whose latent critic returns a constant score."""

    def __init__(self, bundle, value):
        self._bundle = bundle
        self._value = value

    def __getattr__(self, name):
        return getattr(self._bundle, name)

    def critic_latent(self, z, train=True):
        zeros = ad.scale(ad.reduce_mean(ad.flatten(z), axes=(1,), keepdims=True), 0.0)
        return ad.add(zeros, Tensor(np.full(zeros.shape, self._value, dtype=zeros.dtype)))


def _manual_ce(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def test_q_classification_matches_manual_ce(mlp, batches):
    src, _ = batches
    z = mlp.encode_source(src.images)
    logits = mlp.classify(z).data
    assert abs(q_classification(mlp, src).item() - _manual_ce(logits, src.labels)) < 1e-6


def test_q_classification_requires_labels(mlp, batches):
    _, tgt = batches
    with pytest.raises(ValueError):
        q_classification(mlp, tgt)


def test_q_identity_zero_idA_ignores_source(mlp, batches):
    src, tgt = batches
    other_src = _point_batch(np.random.default_rng(99))
    v1 = q_identity(mlp, src, tgt, 0.0, 0.5).item()
    v2 = q_identity(mlp, other_src, tgt, 0.0, 0.5).item()
    assert v1 == v2
    # and no gradient reaches the source decoder's private output layer
    with Tape() as tape:
        loss = q_identity(mlp, src, tgt, 0.0, 0.5)
        backward(loss, tape)
    assert mlp.store.get("g_x.1.w").grad is None
    assert mlp.store.get("g_y.1.w").grad is not None


def test_q_identity_both_zero_is_constant_zero(mlp, batches):
    src, tgt = batches
    with Tape() as tape:
        loss = q_identity(mlp, src, tgt, 0.0, 0.0)
        assert loss.item() == 0.0
        assert len(tape.records) == 0


def test_feature_adversarial_constant_half_critic(mlp, batches):
    src, tgt = batches
    cfg = LambdaConfig()
    stub = _ConstCritic(mlp, 0.5)
    d = q_feature_adversarial(stub, src, tgt, "discriminator", cfg)
    g = q_feature_adversarial(stub, src, tgt, "generator", cfg)
    assert abs(d.item() - 0.25) < 1e-6
    assert abs(g.item() - 0.25) < 1e-6


def test_feature_adversarial_perfect_critic_zero_loss(mlp, batches):
    src, tgt = batches

    class _Perfect(_ConstCritic):
        def critic_latent(self, z, train=True):
            # tells the domains apart by batch size, scoring each perfectly
            val = 1.0 if z.shape[0] == self._value else 0.0
            t = ad.scale(ad.reduce_mean(ad.flatten(z), axes=(1,), keepdims=True), 0.0)
            return ad.add(t, Tensor(np.full(t.shape, val, dtype=t.dtype)))

    # distinguish by batch size: source batch 8, target batch 6
    tgt_small = DomainBatch(images=Tensor(tgt.images.data[:6]), labels=None, domain="target")
    stub = _Perfect(mlp, 8)
    d = q_feature_adversarial(stub, src, tgt_small, "discriminator", LambdaConfig())
    assert d.item() == 0.0


def test_feature_adversarial_routing_target_only(batches):
    src, tgt = batches
    bundle = build_bundle("mlp", num_classes=4, seed=0)
    bundle.untie_encoders()
    cfg = LambdaConfig()
    with Tape() as tape:
        loss = q_feature_adversarial(bundle, src, tgt, "generator", cfg, RoutingRules())
        backward(loss, tape)
    for cid in bundle.store.trainable_ids():
        if cid.startswith("f_x."):
            assert bundle.store.get(cid).grad is None, cid
    assert any(bundle.store.get(c).grad is not None for c in bundle.store.trainable_ids()
               if c.startswith("f_y."))


def test_feature_adversarial_routing_both(batches):
    src, tgt = batches
    bundle = build_bundle("mlp", num_classes=4, seed=0)
    bundle.untie_encoders()
    rules = RoutingRules(feature_adv_generator_side="both")
    with Tape() as tape:
        loss = q_feature_adversarial(bundle, src, tgt, "generator", LambdaConfig(), rules)
        backward(loss, tape)
    assert any(bundle.store.get(c).grad is not None for c in bundle.store.trainable_ids()
               if c.startswith("f_x."))


def _zero_critics(bundle, value=0.0):
    for net in ("d_x", "d_y"):
        for slot in bundle.nets[net].param_slots():
            bundle.store.get(slot).data[:] = 0.0
        if value:
            bundle.store.get(f"{net}.2.b").data[:] = value


def test_translation_critic_zero_net_gives_gp(mlp, batches):
    src, tgt = batches
    _zero_critics(mlp)
    cfg = LambdaConfig(gan_image="wasserstein_gp", gp_coefficient=10.0)
    with Tape():
        d = translation_critic_losses(mlp, src, tgt, cfg, np.random.default_rng(0))
        assert abs(d["d_x"].item() - cfg.gp_coefficient) < 1e-5
        assert abs(d["d_y"].item() - cfg.gp_coefficient) < 1e-5


def test_translation_generator_const_critic_zero_grads(mlp, batches):
    src, tgt = batches
    _zero_critics(mlp, value=3.0)
    cfg = LambdaConfig(gan_image="wasserstein_gp")
    with Tape() as tape:
        loss = q_translation_adversarial(mlp, src, tgt, "generator", cfg)
        assert abs(loss.item() + 6.0) < 1e-5   # -mean(3) per direction
        backward(loss, tape)
    for cid in mlp.net_param_ids("f_x", "f_y", "g_x", "g_y"):
        g = mlp.store.get(cid).grad
        assert g is None or np.all(g == 0), cid


def test_linear_critic_wasserstein_closed_form():
    # two samples, critic(x) = w.x -> hand-computable estimate and penalty
    w = np.array([[0.6, -0.8]], dtype=np.float64)   # unit norm

    def critic_fn(t, train=True):
        return ad.linear(t, Tensor(w, requires_grad=True, dtype=np.float64))

    real = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]), dtype=np.float64)
    fake = Tensor(np.array([[0.5, 0.5], [-0.5, 0.25]]), dtype=np.float64)
    with Tape():
        wdist = ad.add(ad.reduce_mean(critic_fn(fake)), ad.scale(ad.reduce_mean(critic_fn(real)), -1.0))
        pen = gradient_penalty(critic_fn, real, fake, np.random.default_rng(0))
    expect_w = np.mean(fake.data @ w.T) - np.mean(real.data @ w.T)
    assert abs(wdist.item() - expect_w) < 1e-12
    assert pen.item() < 1e-12   # unit-norm critic


def test_gradient_penalty_norm_two_critic_is_one():
    w = 2.0 * np.array([[0.6, -0.8]], dtype=np.float64)

    def critic_fn(t, train=True):
        return ad.linear(t, Tensor(w, requires_grad=True, dtype=np.float64))

    real = Tensor(np.random.default_rng(1).normal(size=(4, 2)), dtype=np.float64)
    fake = Tensor(np.random.default_rng(2).normal(size=(4, 2)), dtype=np.float64)
    with Tape():
        pen = gradient_penalty(critic_fn, real, fake, np.random.default_rng(0))
    assert abs(pen.item() - 1.0) < 1e-6


class _IdentityMaps:
    """Stub bundle whose encode/decode are all identity (or negation)."""

    def __init__(self, sign=1.0):
        self.sign = sign

    def encode_source(self, x, train=True, update_stats=True):
        return ad.scale(x, 1.0)

    encode_target = encode_source

    def decode_source(self, z, train=True, update_stats=True):
        return ad.scale(z, self.sign)

    decode_target = decode_source


def test_q_cycle_identity_maps_is_zero(batches):
    src, tgt = batches
    assert q_cycle(_IdentityMaps(1.0), src, tgt).item() == 0.0


def test_q_cycle_negation_involution_is_zero():
    rng = np.random.default_rng(3)
    imgs = rng.choice([-1.0, 1.0], size=(6, 2)).astype(np.float32)
    b = DomainBatch(images=Tensor(imgs), labels=None, domain="source")
    assert q_cycle(_IdentityMaps(-1.0), b, b).item() == 0.0


def test_q_cycle_matches_manual_composition(mlp, batches):
    src, tgt = batches
    val = q_cycle(mlp, src, tgt).item()
    fx = mlp.encode_source(src.images)
    fake_t = mlp.decode_target(fx)
    back_s = mlp.decode_source(mlp.encode_target(fake_t))
    fy = mlp.encode_target(tgt.images)
    fake_s = mlp.decode_source(fy)
    back_t = mlp.decode_target(mlp.encode_source(fake_s))
    manual = np.abs(back_s.data - src.images.data).mean() + np.abs(back_t.data - tgt.images.data).mean()
    assert abs(val - manual) < 1e-6


def test_q_trc_routing_blocks_gy_and_fx(batches):
    src, _ = batches
    bundle = build_bundle("mlp", num_classes=4, seed=0)
    bundle.untie_encoders()
    with Tape() as tape:
        loss = q_translated_classification(bundle, src, RoutingRules())
        backward(loss, tape)
    for cid in bundle.store.trainable_ids():
        g = bundle.store.get(cid).grad
        if cid.startswith(("g_y.", "f_x.", "g_x.", "d_")):
            assert g is None or np.all(g == 0), cid
    assert any(bundle.store.get(c).grad is not None for c in bundle.store.trainable_ids()
               if c.startswith("f_y."))
    assert any(bundle.store.get(c).grad is not None for c in bundle.store.trainable_ids()
               if c.startswith("h."))


def test_q_trc_without_routing_reaches_gy(batches):
    src, _ = batches
    bundle = build_bundle("mlp", num_classes=4, seed=0)
    bundle.untie_encoders()
    rules = RoutingRules(trc_stop_before_second_encode=False)
    with Tape() as tape:
        loss = q_translated_classification(bundle, src, rules)
        backward(loss, tape)
    gy = [bundle.store.get(c).grad for c in bundle.store.trainable_ids() if c.startswith("g_y.")]
    assert any(g is not None and np.any(g != 0) for g in gy)


def test_q_total_all_zero_empty_tape(mlp, batches):
    src, tgt = batches
    cfg = LambdaConfig(lam_c=0, lam_z=0, lam_tr=0, lam_idA=0, lam_idB=0, lam_cyc=0, lam_trc=0)
    with Tape() as tape:
        total, terms = q_total(mlp, src, tgt, cfg)
        assert total.item() == 0.0
        assert len(tape.records) == 0
        assert all(v == 0.0 for v in terms.values())


def test_q_total_classification_only_matches(mlp, batches):
    src, tgt = batches
    cfg = LambdaConfig(lam_c=1.0, lam_z=0, lam_tr=0, lam_idA=0, lam_idB=0, lam_cyc=0, lam_trc=0)
    total, terms = q_total(mlp, src, tgt, cfg)
    direct = q_classification(mlp, src)
    assert abs(total.item() - direct.item()) < 1e-7
    assert terms["q_c"] == direct.item()


def test_q_total_linear_in_each_lambda(mlp, batches):
    src, tgt = batches
    base = LambdaConfig(lam_c=0.5, lam_z=0, lam_tr=0, lam_idA=0.2, lam_idB=0.3, lam_cyc=0.1, lam_trc=0)
    t1, terms1 = q_total(mlp, src, tgt, base)
    weighted = sum(getattr(base, f"lam_{k[2:]}") * v for k, v in terms1.items() if v)
    assert abs(t1.item() - weighted) < 1e-6
    import dataclasses
    doubled = dataclasses.replace(base, lam_cyc=0.2)
    t2, terms2 = q_total(mlp, src, tgt, doubled)
    assert abs((t2.item() - t1.item()) - 0.1 * terms1["q_cyc"]) < 1e-6


def test_ls_antagonism_direction():
    # generator-side least-squares loss falls exactly as d_z output approaches 1
    vals = [0.1, 0.4, 0.7, 0.95]
    losses = [(v - 1.0) ** 2 for v in vals]
    assert losses == sorted(losses, reverse=True)


def test_critic_losses_only_active_critics(mlp, batches):
    src, tgt = batches
    cfg = LambdaConfig(lam_tr=0.0, lam_z=0.2)
    with Tape():
        d = critic_losses(mlp, src, tgt, cfg)
    assert set(d) == {"d_z"}
    cfg = LambdaConfig(lam_tr=0.02, lam_z=0.0, gan_image="least_squares")
    with Tape():
        d = critic_losses(mlp, src, tgt, cfg)
    assert set(d) == {"d_x", "d_y"}


def test_presets_match_reference_matrix():
    cfg, _ = preset("drcn")
    assert cfg.lam_idB > 0 and cfg.lam_idA == 0 and cfg.lam_z == 0 and cfg.lam_c > 0
    cfg, _ = preset("cyclegan")
    assert cfg.lam_c == 0 and cfg.lam_z == 0 and cfg.lam_idA == 0 and cfg.lam_idB == 0
    assert cfg.lam_tr > 0 and cfg.lam_cyc > 0
    cfg, _ = preset("fcns_wild")
    assert cfg.lam_c > 0 and cfg.lam_z > 0
    assert cfg.lam_tr == cfg.lam_idA == cfg.lam_idB == cfg.lam_cyc == cfg.lam_trc == 0
    cfg, plan = preset("i2i_full")
    assert all(v > 0 for v in cfg.lambdas.values())
    with pytest.raises(ValueError):
        preset("dann")


def test_adda_plan_structure():
    cfg, plan = preset("adda")
    assert len(plan.stages) == 2
    s1, s2 = plan.stages
    assert s1.lambdas.lam_c > 0 and s1.lambdas.lam_z == 0
    assert s2.lambdas.lam_c == 0 and s2.lambdas.lam_z > 0
    kinds = [a[0] for a in s2.actions]
    assert "untie_encoders" in kinds and "freeze" in kinds
    assert plan.steps_for(100) == [50, 50]


def test_preset_table_is_stable():
    t1, t2 = preset_table(), preset_table()
    assert t1 == t2
    lines = t1.splitlines()
    assert lines[0].split()[0] == "preset"
    fcns = [ln for ln in lines if ln.startswith("fcns_wild")][0].split()
    assert fcns[1:] == ["x", "x", ".", ".", ".", ".", "."]
    full = [ln for ln in lines if ln.startswith("i2i_full")][0].split()
    assert full[1:] == ["x"] * 7


def test_lambda_validation():
    with pytest.raises(ValueError):
        LambdaConfig(lam_z=-0.1).validate()
    with pytest.raises(ValueError):
        LambdaConfig(gan_image="hinge").validate()
    with pytest.raises(ValueError):
        RoutingRules(feature_adv_generator_side="source_only").validate()
