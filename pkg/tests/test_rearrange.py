import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hamctl.density import DensityField, QuadratureSpec, class_volumes, lr_distance
from hamctl.errors import InputError, NotEquivalentError
from hamctl.geometry import Mesh, SpaceSpec, cube_index_of
from hamctl.rearrange import (DEMO_CONFIG, PermutationStage, RearrangeConfig, build_permutation,
                              cover_level, demo_pair, quantize, quantize_values, transported,
                              truncate)
from oracles import translate_oracle

E1 = SpaceSpec("euclidean", 1)
Q = QuadratureSpec(256, 3)


def config(**kw):
    base = dict(a=0.5, A=2.5, N=5, h=0.25, quad=Q)
    base.update(kw)
    return RearrangeConfig(**base)


def test_config_validation():
    with pytest.raises(InputError):
        RearrangeConfig(a=1.0, A=0.5, N=2, h=0.1)
    with pytest.raises(InputError):
        RearrangeConfig(a=0.1, A=1.0, N=0, h=0.1)
    with pytest.raises(InputError):
        RearrangeConfig(a=0.1, A=1.0, N=2, h=0.1, eta=0.2)
    assert config().margin == pytest.approx(0.0625)
    assert np.allclose(config().levels, [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5])


def test_truncate_examples():
    rho = DensityField.from_boxes(E1, [([-1, -1], [1, 1], 1.2)])
    X = np.random.default_rng(0).uniform(-1.5, 1.5, (200, 2))
    assert np.array_equal(truncate(rho, 0.5, 2.0)(X), rho(X))
    zero = DensityField.from_expr("0", E1, [-1, -1], [1, 1])
    assert np.all(truncate(zero, 0.5, 2.0)(X) == 0)
    # rho = |x| on [-1, 1]^2: the dropped part is the disc of radius 1/2, mass 2 pi (1/2)^3 / 3
    norm = DensityField.from_callable(lambda X: np.linalg.norm(X, axis=1), E1, [-1, -1], [1, 1])
    err = lr_distance(truncate(norm, 0.5, 10.0), norm, 1.0, Q)
    assert err == pytest.approx(np.pi / 12, abs=1e-3)


def test_quantize_values_round_away_from_zero():
    levels = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])
    v = np.array([0.0, 0.2, 0.5, 0.51, -0.2, -0.5, -0.7, 1.0])
    assert np.array_equal(quantize_values(v, levels), [0, 0.5, 0.5, 1.0, -0.5, -0.5, -1.0, 1.0])


def test_quantize_examples():
    cfg = RearrangeConfig(a=0.1, A=1.0, N=4, h=0.25, quad=Q)
    step = DensityField.from_boxes(E1, [([0, 0], [1, 1], 0.5)])
    q = quantize(step, cfg)
    X = np.random.default_rng(1).uniform(-0.5, 1.5, (300, 2))
    assert np.array_equal(q.density(X), step(X))
    assert q.lr_error == 0.0
    cfg8 = RearrangeConfig(a=0.1, A=1.0, N=8, h=0.25)
    assert quantize(step, cfg8, measure=False).sup_error_bound == q.sup_error_bound / 2
    # rho = q on [0, 1]^2, levels -1, -0.5, 0, 0.5, 1: two bands of volume 0.5
    slab = DensityField.from_expr("q1", E1, [0, 0], [1, 1])
    I = quantize(slab, cfg, measure=False).density
    _, vols, _ = class_volumes(I, cfg.levels, Q)
    assert vols[6] == pytest.approx(0.5, abs=1e-3)
    assert vols[8] == pytest.approx(0.5, abs=1e-3)


def test_cover_level_examples():
    mesh = Mesh(E1, 0.25, (0.0, 0.0), p_box=1.0, q_box=1.0)
    cube = DensityField.from_boxes(E1, [([-0.25, -0.25], [0.25, 0.25], 1.0)])
    cov = cover_level(cube, (0.5, 1.5), mesh, 0.05)
    n = cube_index_of([0.0, 0.0], mesh)
    assert cov.J_hat == [n] and cov.J == [n]
    empty = cover_level(cube, (2.0, 3.0), mesh, 0.05)
    assert empty.J == [] and empty.J_hat == []
    with pytest.raises(InputError):
        cover_level(cube, (-1.0, 1.0), mesh, 0.05)


def test_cover_level_disc_area():
    h = 0.1
    mesh = Mesh(E1, h, (h, h), p_box=0.6, q_box=0.6)
    disc = DensityField.from_callable(lambda X: (np.linalg.norm(X, axis=1) < 0.4).astype(float),
                                      E1, [-0.5, -0.5], [0.5, 0.5])
    cov = cover_level(disc, (0.5, 1.5), mesh, h / 4)
    # pixel-counting oracle: cubes whose center lies in the disc
    pixels = sum(np.linalg.norm(mesh.center(n)) < 0.4 for n in range(mesh.size))
    area = len(cov.J_hat) * (2 * h) ** 2
    assert abs(area - np.pi * 0.16) <= 0.2 * np.pi * 0.16
    assert abs(len(cov.J_hat) - pixels) <= 4


def test_identity_rearrangement():
    rho0, _ = demo_pair()
    res = build_permutation(rho0, rho0, config())
    assert len(res.permutation) == 0
    assert res.lr_error == 0.0


def test_single_cube_translation_matches_oracle():
    h = 0.5
    mesh = Mesh(E1, h, (0.0, 0.0), p_box=1.0, q_box=5.0)
    rho0 = DensityField.from_cubes(E1, [((0.0, 0.0), h, 1.0)]).with_box([-1, -1], [5, 1])
    rho1 = DensityField.from_cubes(E1, [((4.0, 0.0), h, 1.0)]).with_box([-1, -1], [5, 1])
    cfg = RearrangeConfig(a=0.5, A=1.5, N=3, h=h, quad=Q)
    res = build_permutation(rho0, rho1, cfg, mesh=mesh)
    k0 = mesh.lattice_of(cube_index_of([0.0, 0.0], mesh))
    k1 = mesh.lattice_of(cube_index_of([4.0, 0.0], mesh))
    n0, n1 = cube_index_of([0.0, 0.0], mesh), cube_index_of([4.0, 0.0], mesh)
    assert res.permutation.mapping == {n1: n0, n0: n1}
    X = np.random.default_rng(2).uniform([3.6, -0.4], [4.4, 0.4], (100, 2))
    want = translate_oracle(X, h, (0.0, 0.0), {tuple(k1): tuple(k0)})
    assert np.allclose(PermutationStage(res.permutation, mesh)(X), want)
    assert res.lr_error <= 1e-3


def test_not_equivalent_raises():
    rho0, _ = demo_pair()
    with pytest.raises(NotEquivalentError):
        build_permutation(rho0, rho0 * 2.0, config(A=4.5, N=9))


def test_demo_pair_refinement_ladder():
    errs = []
    for h in (0.5, 0.25, 0.125):
        rho0, rho1 = demo_pair()
        res = build_permutation(rho0, rho1, config(h=h))
        errs.append(res.lr_error)
    for a, b in zip(errs, errs[1:]):
        assert b <= 1.1 * a
    assert errs[1] <= 0.15


@settings(max_examples=10)
@given(st.integers(0, 10_000))
def test_random_pairs_give_valid_permutations(seed):
    rng = np.random.default_rng(seed)
    h = 0.25
    cells = rng.permutation(16)[:4]
    centers = [(-1.75 + 0.5 * (c % 8), -0.25 + 0.5 * (c // 8)) for c in cells]
    w = [1.0, 1.0, 2.0, 2.0]
    rho0 = DensityField.from_cubes(E1, [(c, h, wi) for c, wi in zip(centers, w)])
    rho1 = DensityField.from_cubes(E1, [(c, h, wi) for c, wi in zip(centers, rng.permutation(w))])
    lo, hi = [-2.0, -0.5], [2.0, 0.5]
    rho0, rho1 = rho0.with_box(lo, hi), rho1.with_box(lo, hi)
    cfg = config(h=h)
    res = build_permutation(rho0, rho1, cfg)
    perm = res.permutation
    assert sorted(perm.mapping.keys()) == sorted(perm.mapping.values())
    moved = transported(rho0, res)
    assert lr_distance(moved, rho1, 1.0, Q, lo, hi) <= 1e-3
    for lvl in res.per_level:
        assert abs(lvl["band_volume1"] - lvl["cover_volume"]) <= 12 * (2 * h) ** 2
