import numpy as np
import pytest

from neighborlab.model import (
    PARAM_NAMES,
    Attribution,
    ModelConfig,
    ModelParams,
    attribute_scores,
    backward,
    backward_batch,
    batch_loss_and_grad,
    forward,
    forward_batch,
    init_params,
    l2_term,
    label_sign_matrix,
    load_checkpoint,
    loss_and_grad_scores,
    make_dropout_masks,
    save_checkpoint,
    score_image,
    zeros_like_params,
)
from neighborlab.util import ValidationError


def random_instance(seed, d=7, h=5, n_labels=4, m=3, ext=0):
    rng = np.random.default_rng(seed)
    params = init_params(d, h, n_labels, seed, ext_width=ext)
    x = rng.normal(size=d)
    z = rng.normal(size=(m, d))
    tag = (rng.random(ext) < 0.5).astype(float) if ext else None
    labels = set(rng.choice(n_labels, size=2, replace=False).tolist())
    return params, x, z, tag, labels


# ---------------------------------------------------------------------------
# independent oracle: plain-loop dense math


def forward_oracle(params, x, z, tag=None):
    d, h, n_labels = params.d, params.h, params.n_labels
    v_x = [
        max(0.0, sum(params.w_x[i, j] * x[i] for i in range(d)) + params.b_x[j])
        for j in range(h)
    ]
    m = len(z)
    v_z = []
    for j in range(h):
        acts = [
            max(0.0, sum(params.w_z[i, j] * z[k][i] for i in range(d)) + params.b_z[j])
            for k in range(m)
        ]
        v_z.append(max(acts) if acts else 0.0)
    u = list(v_x) + list(v_z) + (list(tag) if tag is not None else [])
    return np.array(
        [
            sum(params.w_y[r, c] * u[r] for r in range(len(u))) + params.b_y[c]
            for c in range(n_labels)
        ]
    )


def finite_difference_grads(params, loss_fn, step=1e-5):
    grads = {}
    for name in PARAM_NAMES:
        arr = getattr(params, name)
        g = np.zeros_like(arr)
        flat, gflat = arr.ravel(), g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_rel_error(analytic, numeric):
    """Gradient-check error: |a - n| / max(|a|, |n|, 1)."""
    worst = 0.0
    for name in PARAM_NAMES:
        a, n = analytic[name] if isinstance(analytic, dict) else getattr(analytic, name), numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# ---------------------------------------------------------------------------
# forward


def test_zero_params_zero_scores():
    params, x, z, _, _ = random_instance(0)
    zero = zeros_like_params(params)
    scores, _ = forward(zero, x, z)
    assert np.all(scores == 0.0)


def test_single_neighbor_pooling_is_identity():
    params, x, z, _, _ = random_instance(1, m=1)
    scores, cache = forward(params, x, z)
    expected_vz = np.maximum(z[0] @ params.w_z + params.b_z, 0.0)
    assert np.array_equal(cache.v_z, expected_vz)


def test_forward_matches_dense_oracle():
    for seed in range(4):
        params, x, z, tag, _ = random_instance(seed, ext=6 if seed % 2 else 0)
        scores, _ = forward(params, x, z, tag_vector=tag)
        expected = forward_oracle(params, x, z, tag)
        assert np.allclose(scores, expected, rtol=1e-12, atol=1e-12)


def test_forward_permutation_invariance_bit_identical():
    params, x, z, _, _ = random_instance(2)
    scores, _ = forward(params, x, z)
    for perm in ([2, 0, 1], [1, 2, 0], [2, 1, 0]):
        permuted, _ = forward(params, x, z[perm])
        assert np.array_equal(scores, permuted)


def test_forward_duplicate_neighbor_no_change():
    params, x, z, _, _ = random_instance(3)
    _, cache = forward(params, x, z)
    z_dup = np.vstack([z, z[1:2]])
    _, cache_dup = forward(params, x, z_dup)
    assert np.array_equal(cache.v_z, cache_dup.v_z)


def test_forward_degenerate_zero_neighbors():
    params, x, _, _, _ = random_instance(4)
    scores, cache = forward(params, x, np.zeros((0, params.d)))
    assert np.all(cache.v_z == 0.0)
    assert np.all(cache.z_argmax == -1)
    # neighbor block contributes nothing
    expected = params.w_y[: params.h].T @ cache.v_x + params.b_y
    assert np.allclose(scores, expected, rtol=1e-12, atol=1e-12)


def test_forward_shape_and_finite_validation():
    params, x, z, _, _ = random_instance(5)
    with pytest.raises(ValidationError, match="shape"):
        forward(params, x[:-1], z)
    bad = z.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValidationError, match="non-finite"):
        forward(params, x, bad)
    with pytest.raises(ValidationError, match="tag"):
        forward(params, x, z, tag_vector=np.ones(3))


def test_dropout_masks_applied_and_cached():
    params, x, z, _, _ = random_instance(6)
    rng = np.random.default_rng(0)
    scores, cache = forward(params, x, z, train=True, dropout_p=0.5, rng=rng)
    assert cache.mask_x is not None
    assert set(np.unique(cache.mask_x)).issubset({0.0, 2.0})
    u_expected = np.concatenate([cache.v_x * cache.mask_x, cache.v_z * cache.mask_z])
    assert np.array_equal(cache.u, u_expected)
    # evaluation never drops
    scores_eval, cache_eval = forward(params, x, z, train=False, dropout_p=0.5)
    assert cache_eval.mask_x is None


# ---------------------------------------------------------------------------
# loss


def test_loss_all_zero_scores_is_l_log2():
    loss, dscores = loss_and_grad_scores(np.zeros(4), {0})
    assert loss == pytest.approx(4 * np.log(2.0), rel=1e-15)
    # gradient of softplus at 0 is +-1/2
    assert dscores == pytest.approx(np.array([-0.5, 0.5, 0.5, 0.5]))


def test_loss_saturates_for_confident_positive():
    loss_small, _ = loss_and_grad_scores(np.array([50.0, 0.0]), {0})
    loss_large, _ = loss_and_grad_scores(np.array([1e4, 0.0]), {0})
    assert loss_large <= loss_small
    assert loss_large == pytest.approx(np.log(2.0))  # only the negative term remains


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    scores = rng.normal(size=6)
    labels = {1, 4}
    _, dscores = loss_and_grad_scores(scores, labels)
    step = 1e-6
    for c in range(6):
        up = scores.copy()
        up[c] += step
        down = scores.copy()
        down[c] -= step
        fd = (loss_and_grad_scores(up, labels)[0] - loss_and_grad_scores(down, labels)[0]) / (
            2 * step
        )
        assert dscores[c] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_batch_loss_matches_per_example_sum():
    rng = np.random.default_rng(10)
    scores = rng.normal(size=(5, 4))
    label_sets = [{0}, {1, 2}, {3}, {0, 3}, {2}]
    y = label_sign_matrix(label_sets, 4)
    batch_loss, batch_grad = batch_loss_and_grad(scores, y)
    total = 0.0
    for row, labels in enumerate(label_sets):
        loss, dscores = loss_and_grad_scores(scores[row], labels)
        total += loss
        assert np.allclose(batch_grad[row], dscores, rtol=1e-12)
    assert batch_loss == pytest.approx(total, rel=1e-12)


# ---------------------------------------------------------------------------
# backward


def data_loss_fn(params, x, z, labels, tag=None, masks=None):
    def run():
        scores, _ = forward(
            params, x, z, tag_vector=tag,
            train=masks is not None, dropout_p=0.5 if masks is not None else 0.0,
            dropout_masks=masks,
        )
        return loss_and_grad_scores(scores, labels)[0]

    return run


def analytic_grads(params, x, z, labels, tag=None, masks=None):
    scores, cache = forward(
        params, x, z, tag_vector=tag,
        train=masks is not None, dropout_p=0.5 if masks is not None else 0.0,
        dropout_masks=masks,
    )
    _, dscores = loss_and_grad_scores(scores, labels)
    return backward(params, cache, dscores)


def test_zero_dscores_zero_gradients():
    params, x, z, _, _ = random_instance(11)
    _, cache = forward(params, x, z)
    grads = backward(params, cache, np.zeros(params.n_labels))
    for name in PARAM_NAMES:
        assert np.all(getattr(grads, name) == 0.0)


def test_single_neighbor_gradient_equals_plain_chain_rule():
    params, x, z, _, labels = random_instance(12, m=1)
    grads = analytic_grads(params, x, z, labels)
    scores, cache = forward(params, x, z)
    _, dscores = loss_and_grad_scores(scores, labels)
    dvz = (params.w_y @ dscores)[params.h : 2 * params.h]
    dpre = dvz * (cache.pre_z[0] > 0)
    assert np.allclose(grads.w_z, np.outer(z[0], dpre), rtol=1e-12)
    assert np.allclose(grads.b_z, dpre, rtol=1e-12)


@pytest.mark.parametrize("ext,with_dropout", [(0, False), (0, True), (6, False), (6, True)])
def test_gradients_match_finite_differences(ext, with_dropout):
    for seed in range(3):
        params, x, z, tag, labels = random_instance(100 + seed, ext=ext)
        masks = None
        if with_dropout:
            masks = make_dropout_masks(params.h, 0.5, np.random.default_rng(seed))
        grads = analytic_grads(params, x, z, labels, tag, masks)
        fd = finite_difference_grads(params, data_loss_fn(params, x, z, labels, tag, masks))
        assert max_rel_error(grads, fd) < 1e-5


def test_gradients_degenerate_mode():
    params, x, _, _, labels = random_instance(13)
    z = np.zeros((0, params.d))
    grads = analytic_grads(params, x, z, labels)
    assert np.all(grads.w_z == 0.0) and np.all(grads.b_z == 0.0)
    fd = finite_difference_grads(params, data_loss_fn(params, x, z, labels))
    assert max_rel_error(grads, fd) < 1e-5


def test_backward_rejects_mismatched_cache():
    params, x, z, _, _ = random_instance(14)
    other = init_params(params.d + 1, params.h, params.n_labels, 0)
    _, cache = forward(params, x, z)
    with pytest.raises(ValidationError, match="cache"):
        backward(other, cache, np.zeros(params.n_labels))


# ---------------------------------------------------------------------------
# batched fast path agrees with the per-example contract


def test_forward_backward_batch_match_per_example():
    rng = np.random.default_rng(15)
    params, *_ = random_instance(15, d=6, h=4, n_labels=3, m=2)
    b = 5
    x = rng.normal(size=(b, 6))
    z = rng.normal(size=(b, 2, 6))
    mask_x = np.stack([make_dropout_masks(4, 0.5, np.random.default_rng(i))[0] for i in range(b)])
    mask_z = np.stack([make_dropout_masks(4, 0.5, np.random.default_rng(10 + i))[1] for i in range(b)])
    label_sets = [{0}, {1}, {2}, {0, 2}, {1, 2}]
    y = label_sign_matrix(label_sets, 3)

    scores_b, cache_b = forward_batch(params, x, z, masks=(mask_x, mask_z))
    _, dscores_b = batch_loss_and_grad(scores_b, y)
    grads_b = backward_batch(params, cache_b, dscores_b)

    total = zeros_like_params(params)
    for i in range(b):
        scores_i, cache_i = forward(
            params, x[i], z[i], train=True, dropout_p=0.5,
            dropout_masks=(mask_x[i], mask_z[i]),
        )
        assert np.allclose(scores_b[i], scores_i, rtol=1e-12, atol=1e-12)
        _, dscores_i = loss_and_grad_scores(scores_i, label_sets[i])
        g = backward(params, cache_i, dscores_i)
        for name in PARAM_NAMES:
            getattr(total, name).__iadd__(getattr(g, name))
    for name in PARAM_NAMES:
        assert np.allclose(getattr(grads_b, name), getattr(total, name), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------------------
# regularization


def test_l2_term_examples():
    params, *_ = random_instance(16)
    penalty, grads = l2_term(params, 0.0)
    assert penalty == 0.0
    assert np.all(grads.w_x == 0.0)

    lam = 3e-3
    single = ModelParams(
        w_x=np.array([[2.0]]), b_x=np.zeros(1), w_z=np.zeros((1, 1)),
        b_z=np.zeros(1), w_y=np.zeros((2, 1)), b_y=np.zeros(1),
    )
    penalty, grads = l2_term(single, lam)
    assert penalty == pytest.approx(lam * 4.0 / 2.0)
    assert grads.w_x[0, 0] == pytest.approx(lam * 2.0)
    assert np.all(grads.b_x == 0.0) and np.all(grads.b_y == 0.0)


# ---------------------------------------------------------------------------
# neighborhood averaging


def test_score_image_single_and_identical_samples():
    params, x, z, _, _ = random_instance(17)
    lookup = {10: z[0], 11: z[1], 12: z[2]}
    single = score_image(params, x, [(10, 11, 12)], lookup)
    direct, _ = forward(params, x, z)
    assert np.allclose(single, direct, rtol=1e-12)
    repeated = score_image(params, x, [(10, 11, 12)] * 10, lookup)
    assert np.allclose(repeated, direct, rtol=1e-12)


def test_score_image_full_enumeration_average():
    from itertools import combinations

    params, x, _, _, _ = random_instance(18, m=1)
    rng = np.random.default_rng(18)
    pool = {i: rng.normal(size=params.d) for i in range(6)}
    subsets = [tuple(s) for s in combinations(range(6), 3)]
    got = score_image(params, x, subsets, pool)
    acc = np.zeros(params.n_labels)
    for subset in subsets:
        z = np.stack([pool[i] for i in subset])
        scores, _ = forward(params, x, z)
        acc += scores
    assert np.allclose(got, acc / len(subsets), rtol=1e-12)


# ---------------------------------------------------------------------------
# attribution


def test_attribution_parts_sum_to_scores():
    for seed in range(3):
        params, x, z, tag, _ = random_instance(30 + seed, ext=6 if seed == 2 else 0)
        scores, cache = forward(params, x, z, tag_vector=tag)
        att = attribute_scores(params, cache)
        assert np.allclose(att.total(), scores, rtol=0, atol=1e-12)
        if seed == 2:
            assert att.tag_part is not None


def test_attribution_zero_neighbors():
    params, x, _, _, _ = random_instance(19)
    _, cache = forward(params, x, np.zeros((0, params.d)))
    att = attribute_scores(params, cache)
    assert np.all(att.neighbor_part == 0.0)


def test_attribution_rejects_train_cache():
    params, x, z, _, _ = random_instance(20)
    _, cache = forward(params, x, z, train=True, dropout_p=0.5,
                       rng=np.random.default_rng(0))
    with pytest.raises(ValidationError, match="evaluation"):
        attribute_scores(params, cache)


# ---------------------------------------------------------------------------
# init and checkpoints


def test_init_shapes_and_zero_biases():
    params = init_params(4096, 500, 81, seed=1)
    assert params.w_x.shape == (4096, 500)
    assert params.w_y.shape == (1000, 81)
    assert np.all(params.b_x == 0) and np.all(params.b_z == 0) and np.all(params.b_y == 0)


def test_init_weight_scale():
    params = init_params(1000, 50, 4, seed=2)
    target = np.sqrt(2.0 / 1000)
    assert abs(params.w_x.std() - target) / target < 0.05
    assert abs(params.w_y.std() - np.sqrt(2.0 / 100)) / np.sqrt(2.0 / 100) < 0.05


def test_init_deterministic():
    a = init_params(10, 5, 3, seed=7)
    b = init_params(10, 5, 3, seed=7)
    c = init_params(10, 5, 3, seed=8)
    assert np.array_equal(a.w_x, b.w_x)
    assert not np.array_equal(a.w_x, c.w_x)


def test_checkpoint_round_trip(tmp_path):
    params, *_ = random_instance(21, ext=4)
    path = tmp_path / "model.nlpm"
    save_checkpoint(path, params, {"epoch": 3, "val": 51.2})
    loaded, meta = load_checkpoint(path)
    for name in PARAM_NAMES:
        assert np.array_equal(getattr(loaded, name), getattr(params, name))
    assert meta["epoch"] == 3
    assert meta["ext_width"] == 4


def test_model_config_validation():
    with pytest.raises(ValidationError):
        ModelConfig(h=10, dropout_p=1.0)
    with pytest.raises(ValidationError):
        ModelConfig(h=10, use_tag_vector=True, tag_width=0)
    cfg = ModelConfig(h=10, use_tag_vector=False, tag_width=9)
    assert cfg.ext_width == 0
