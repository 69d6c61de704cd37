import hashlib

import numpy as np
import pytest

from moefuse import checkpoint as cp
from moefuse import training as tr
from moefuse.composer import compose
from moefuse.errors import EmptyInput, ModeMismatch
from moefuse.model import MoeModel, random_dense_checkpoint
from moefuse.stitch import BtsModel
from moefuse.trace import RouteDecision

from conftest import make_config, save_expert

MICRO_ARCH = cp.ArchInfo(vocab_size=11, d_model=4, n_blocks=2, n_heads=2, d_ff=6)


def micro_moe(tmp_path, method, k, n_experts=2, alpha=0.0, arch=MICRO_ARCH, seed=0,
              router_scale=0.5):
    dirs = [save_expert(tmp_path, f"m{seed}_{i}", seed=seed * 10 + i, arch=arch,
                        scale=0.6) for i in range(n_experts)]
    ckpt, _ = compose(make_config(method, dirs, k=k, alpha=alpha, seed=seed))
    model = MoeModel.from_checkpoint(ckpt)
    # randomize routers so logits are not near ties
    rng = np.random.default_rng(seed + 1000)
    ups = {n: rng.normal(scale=router_scale, size=model.params[n].shape)
           for n in model.trainable_param_names()}
    return model.replace_params(ups)


def micro_bts(tmp_path, seed=0, n_experts=2, randomize=True):
    dirs = [save_expert(tmp_path, f"b{seed}_{i}", seed=seed * 10 + i, arch=MICRO_ARCH,
                        scale=0.6) for i in range(n_experts + 1)]
    ckpt, _ = compose(make_config("bts", dirs, k=1, stitch_freq=1, seed=seed))
    bts = BtsModel.from_checkpoint(ckpt)
    if randomize:
        rng = np.random.default_rng(seed + 2000)
        ups = {n: rng.normal(scale=0.4, size=bts.params[n].shape)
               for n in bts.trainable_param_names()}
        bts = bts.replace_params(ups)
    return bts


def checksums(model, names):
    return {n: hashlib.sha256(model.params[n].data.tobytes()).hexdigest() for n in names}


# -- load balancing -----------------------------------------------------------


def uniform_decisions():
    # tiny negative denormal forces distinct top-1 picks while softmax stays
    # exactly [0.5, 0.5]
    d1 = RouteDecision(0, 0, "block", [0], np.array([1.0]), np.array([0.0, -1e-300]))
    d2 = RouteDecision(1, 0, "block", [1], np.array([1.0]), np.array([-1e-300, 0.0]))
    return [d1, d2]


def collapsed_decisions():
    logits = np.array([np.log(9.0), 0.0])  # softmax = [0.9, 0.1]
    return [RouteDecision(t, 0, "block", [0], np.array([1.0]), logits.copy())
            for t in range(4)]


def test_lb_uniform_is_exactly_one():
    assert tr.load_balance_loss(uniform_decisions(), 2) == 1.0


def test_lb_collapsed_hand_value():
    assert abs(tr.load_balance_loss(collapsed_decisions(), 2) - 1.8) <= 1e-12


def test_lb_uniform_three_experts():
    decs = []
    for t in range(3):
        logits = np.full(3, -1e-300)
        logits[t] = 0.0
        decs.append(RouteDecision(t, 0, "block", [t], np.array([1.0]), logits))
    assert abs(tr.load_balance_loss(decs, 3) - 1.0) <= 1e-15


def test_lb_count_all_k_flag():
    # one decision selecting both experts: f = [0.5, 0.5] under the flag,
    # [1, 0] under the top-1 convention
    dec = RouteDecision(0, 0, "block", [0, 1], np.array([0.5, 0.5]),
                        np.array([0.0, -1e-300]))
    top1 = tr.load_balance_loss([dec], 2)
    split = tr.load_balance_loss([dec], 2, count_all_k=True)
    assert top1 == 2 * 0.5  # f=[1,0], P=[.5,.5]
    assert split == 1.0


def test_lb_empty_input():
    with pytest.raises(EmptyInput):
        tr.load_balance_loss([], 2)


def test_alpha_zero_total_is_ce_bitwise(tmp_path):
    model = micro_moe(tmp_path, "btx", k=2)
    bd = tr.batch_loss(model, [[1, 2, 3]], alpha=0.0)
    assert bd.total == bd.ce
    assert bd.lb > 0.0


# -- gradient checks ----------------------------------------------------------


def test_router_grads_match_fd_k_equals_e_minimal(tmp_path):
    arch = cp.ArchInfo(vocab_size=5, d_model=2, n_blocks=1, n_heads=1, d_ff=3)
    model = micro_moe(tmp_path, "traditional", k=2, arch=arch, seed=3)
    batch = [[1, 2]]  # single prediction
    grads, _ = tr.router_grads(model, batch)
    numeric = tr.numerical_grads(model, batch, model.trainable_param_names())
    for name in grads:
        assert tr.max_relative_error(grads[name], numeric[name]) <= 1e-6


def test_router_grads_match_fd_both_modes(tmp_path):
    for method in ("traditional", "btx"):
        for k in (1, 2):
            model = micro_moe(tmp_path, method, k=k, alpha=0.05, seed=4 + k)
            batch = [[1, 2, 3, 4], [5, 6, 7]]
            grads, _ = tr.router_grads(model, batch, alpha=0.05)
            numeric = tr.numerical_grads(model, batch, model.trainable_param_names(),
                                         alpha=0.05)
            for name in grads:
                err = tr.max_relative_error(grads[name], numeric[name])
                assert err <= 1e-6, f"{method} k={k} {name}: {err}"


def test_router_grads_k1_alpha0_matches_fd(tmp_path):
    # with k=1 the renormalized weight is pinned at 1.0, so the true ce
    # gradient through the router is zero; both sides must agree on that
    model = micro_moe(tmp_path, "traditional", k=1, seed=8)
    batch = [[1, 2, 3]]
    grads, _ = tr.router_grads(model, batch, alpha=0.0)
    numeric = tr.numerical_grads(model, batch, model.trainable_param_names(), alpha=0.0)
    for name in grads:
        assert np.abs(grads[name]).max() == 0.0
        assert np.abs(numeric[name]).max() <= 1e-9


def test_router_grads_empty_batch(tmp_path):
    model = micro_moe(tmp_path, "btx", k=2, seed=9)
    with pytest.raises(EmptyInput):
        tr.router_grads(model, [])
    with pytest.raises(EmptyInput):
        tr.router_grads(model, [[4]])


def test_router_grads_mode_mismatch(tmp_path):
    dense = MoeModel.from_checkpoint(
        random_dense_checkpoint(MICRO_ARCH, seed=1, scale=0.5))
    with pytest.raises(ModeMismatch):
        tr.router_grads(dense, [[1, 2]])


def test_stitch_grads_match_fd(tmp_path):
    bts = micro_bts(tmp_path, seed=5)
    batch = [[1, 2, 3], [4, 5, 6, 7]]
    grads, _ = tr.stitch_grads(bts, batch)
    numeric = tr.numerical_grads(bts, batch, bts.trainable_param_names())
    for name in grads:
        err = tr.max_relative_error(grads[name], numeric[name])
        assert err <= 1e-6, f"{name}: {err}"


def test_stitch_grads_finite_at_saturated_init(tmp_path):
    bts = micro_bts(tmp_path, seed=6, randomize=False)
    grads, bd = tr.stitch_grads(bts, [[1, 2, 3]])
    assert np.isfinite(bd.ce)
    for g in grads.values():
        assert np.all(np.isfinite(g))


def test_frozen_tensors_unchanged_by_training(tmp_path):
    model = micro_moe(tmp_path, "btx", k=2, seed=7)
    frozen = [n for n in model.params if n not in set(model.trainable_param_names())]
    before = checksums(model, frozen)
    trained, _ = tr.train(model, [[1, 2, 3, 4]], steps=5, lr=0.5, alpha=0.01)
    assert checksums(trained, frozen) == before

    bts = micro_bts(tmp_path, seed=8)
    frozen = [n for n in bts.params if not n.startswith("stitch.")]
    before = checksums(bts, frozen)
    trained, _ = tr.train(bts, [[1, 2, 3, 4]], steps=3, lr=1.0)
    assert checksums(trained, frozen) == before


# -- the SGD wrapper -----------------------------------------------------------


def test_lr_zero_constant_curve(tmp_path):
    model = micro_moe(tmp_path, "traditional", k=2, seed=10)
    _, hist = tr.train(model, [[1, 2, 3]], steps=4, lr=0.0)
    assert len(hist) == 4
    assert len({bd.total for bd in hist}) == 1


def test_train_deterministic(tmp_path):
    model = micro_moe(tmp_path, "btx", k=2, seed=11)
    batch = [[1, 2, 3], [4, 5, 6]]
    _, h1 = tr.train(model, batch, steps=5, lr=0.5, alpha=0.02)
    _, h2 = tr.train(model, batch, steps=5, lr=0.5, alpha=0.02)
    assert [b.total for b in h1] == [b.total for b in h2]


def domain_corpus(seed=123, per_domain=6, length=10):
    rng = np.random.default_rng(seed)
    A = [ord(c) for c in "abcdefghijklm"]
    B = [ord(c) for c in "nopqrstuvwxyz"]
    seqs = []
    for alphabet in (A, B):
        for _ in range(per_domain):
            seqs.append([256] + [int(c) for c in rng.choice(alphabet, size=length)] + [257])
    return seqs


def byte_vocab_moe(tmp_path, method, k, seed=0, skew=0.0):
    arch = cp.ArchInfo(vocab_size=258, d_model=16, n_blocks=2, n_heads=2, d_ff=24)
    dirs = [save_expert(tmp_path, f"bv{i}", seed=60 + i, arch=arch, scale=0.6)
            for i in range(2)]
    ckpt, _ = compose(make_config(method, dirs, k=k, seed=seed))
    model = MoeModel.from_checkpoint(ckpt)
    if skew:
        ups = {}
        for n in model.trainable_param_names():
            W = model.params[n].data.copy()
            W[:, 0] += skew
            ups[n] = W
        model = model.replace_params(ups)
    return model


def test_training_decreases_ce(tmp_path):
    corpus = domain_corpus()
    model = byte_vocab_moe(tmp_path, "traditional", k=2)
    trained, hist = tr.train(model, corpus, steps=50, lr=5.0, alpha=0.0)
    final = tr.batch_loss(trained, corpus, alpha=0.0)
    assert final.ce < hist[0].ce


def test_balancing_lowers_max_fraction(tmp_path):
    corpus = domain_corpus()
    model = byte_vocab_moe(tmp_path, "traditional", k=1, skew=0.5)

    def max_f(m):
        decs = []
        for s in corpus:
            _, trace = m.forward(s)
            decs.extend(trace.decisions)
        _, f, _ = tr._lb_stats(decs, m.num_experts)
        return float(f.max())

    plain, _ = tr.train(model, corpus, steps=60, lr=5.0, alpha=0.0)
    balanced, _ = tr.train(model, corpus, steps=60, lr=5.0, alpha=0.01)
    assert max_f(balanced) < max_f(plain)
