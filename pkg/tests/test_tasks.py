import itertools

import numpy as np
import pytest

from safeanchor.model import base_checksum
from safeanchor.tasks import (
    REFUSAL,
    SuiteConfig,
    accuracy,
    align_base,
    composite_safety,
    domain_order,
    dump_dataset,
    generate_suite,
    load_dataset,
    min_separation,
    safety_components,
    substream,
)


@pytest.fixture(scope="module")
def suite():
    return generate_suite(3)


@pytest.fixture(scope="module")
def aligned(suite):
    return align_base(3, suite)


@pytest.mark.parametrize("triple,expected", [((100, 100, 0), 100.0), ((60, 60, 40), 60.0), ((0, 0, 100), 0.0)])
def test_composite_examples(triple, expected):
    assert abs(composite_safety(*triple) - expected) <= 1e-12


def test_composite_rejects_out_of_range():
    with pytest.raises(ValueError):
        composite_safety(101, 50, 50)
    with pytest.raises(ValueError):
        composite_safety(50, -1, 50)


def test_suite_is_deterministic(suite):
    again = generate_suite(3)
    for a, b in zip(suite.all_sets(), again.all_sets()):
        assert a.x.tobytes() == b.x.tobytes()
        assert a.ids.tobytes() == b.ids.tobytes()
        assert a.y.tobytes() == b.y.tobytes()
    other = generate_suite(4)
    assert other.calib.x.tobytes() != suite.calib.x.tobytes()


def test_ids_unique_across_sets(suite):
    ids = np.concatenate([d.ids for d in suite.all_sets()])
    assert len(np.unique(ids)) == len(ids)
    assert not set(suite.calib.ids) & set(suite.probe.ids)


def test_set_sizes_and_splits(suite):
    cfg = suite.config
    assert len(suite.calib) == cfg.n_safe
    assert suite.calib.harmful.sum() == cfg.n_safe // 2
    assert np.all(suite.calib.y[suite.calib.harmful] == REFUSAL)
    assert np.all(suite.calib.y[~suite.calib.harmful] != REFUSAL)
    assert len(suite.probe) == 200
    assert suite.probe.harmful.sum() == 100
    assert len(suite.domains) == cfg.n_domain_pool
    for d in suite.domains:
        assert len(d) == cfg.examples_per_domain
        assert (d.split == "overlap").sum() == round(cfg.examples_per_domain * cfg.overlap_fraction)
        # the overlap slice carries a helpful label on harmful-region inputs
        assert np.all(d.y[d.split == "overlap"] != REFUSAL)


def test_component_means_separated(suite):
    assert min_separation(suite) >= 4.0
    m = np.concatenate([suite.means["general"], suite.means["harmful"], suite.means["domain"].reshape(-1, 32)])
    scan = min(np.linalg.norm(a - b) for a, b in itertools.combinations(m, 2))
    assert scan == pytest.approx(min_separation(suite) * suite.config.sigma)


def test_separation_holds_for_other_seeds():
    for seed in range(5):
        assert min_separation(generate_suite(seed, SuiteConfig(examples_per_domain=50))) >= 4.0


def test_substreams_independent():
    a = substream(0, "batch/1").random(4)
    b = substream(0, "batch/2").random(4)
    c = substream(0, "batch/1").random(4)
    assert not np.array_equal(a, b)
    np.testing.assert_array_equal(a, c)


def test_domain_order_permutations():
    assert domain_order(3, 0) == (0, 1, 2)
    assert len({domain_order(3, p) for p in range(6)}) == 6
    with pytest.raises(ValueError):
        domain_order(3, 6)


def test_dataset_round_trip(tmp_path, suite):
    path = tmp_path / "probe.jsonl"
    dump_dataset(suite.probe, path)
    back = load_dataset(path)
    assert back.name == "probe"
    assert back.x.tobytes() == suite.probe.x.tobytes()
    np.testing.assert_array_equal(back.ids, suite.probe.ids)
    np.testing.assert_array_equal(back.y, suite.probe.y)
    np.testing.assert_array_equal(back.harmful, suite.probe.harmful)
    np.testing.assert_array_equal(back.split, suite.probe.split)


def test_dataset_load_rejects_truncated(tmp_path, suite):
    path = tmp_path / "c.jsonl"
    dump_dataset(suite.calib.subset(np.arange(3)), path)
    path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(ValueError):
        load_dataset(path)


def test_alignment_reaches_criterion(aligned, suite):
    assert aligned.s0 >= 0.90
    assert aligned.general > 0.5
    comps = safety_components(aligned.model, suite.probe)
    assert comps["refusal"] == pytest.approx(100 * aligned.s0)
    assert comps["composite"] == pytest.approx(composite_safety(comps["refusal"], comps["truthful"], comps["bias"]))


def test_alignment_deterministic_and_frozen(aligned, suite):
    again = align_base(3, suite)
    assert base_checksum(again.model) == base_checksum(aligned.model)
    with pytest.raises(ValueError):
        aligned.model.layers[0].w[0, 0] = 0.0


def test_accuracy_on_empty_set(aligned, suite):
    assert np.isnan(accuracy(aligned.model, suite.calib.subset([])))
