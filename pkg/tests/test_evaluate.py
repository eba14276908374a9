import numpy as np
import pytest
import torch

from refharm.batch import SceneBatch, to_hwc
from refharm.errors import ConfigurationError
from refharm.evaluate import evaluate
from refharm.harmonizer import Harmonizer, harmonize
from refharm.metrics import fmse
from refharm.reflectance import ReflectanceModel
from refharm.retinex import synth_sample


@pytest.fixture(scope="module")
def setup():
    torch.manual_seed(0)
    harm = Harmonizer(base=8, depth=2)
    refl = ReflectanceModel(latent_dim=4, base=8, depth=2)
    data = SceneBatch.from_samples([synth_sample(16, 16, np.random.default_rng(i)) for i in range(5)])
    return harm, refl, data


def test_single_base_matches_direct_call(setup):
    harm, _, data = setup
    report = evaluate(harm, data, "base")
    for i, row in enumerate(report.rows):
        item = data.index(slice(i, i + 1))
        out = harmonize(harm, item.composite, item.mask)
        expected = fmse(to_hwc(out), to_hwc(item.ground_truth), item.mask[0, 0].double().numpy())
        assert row["fmse"] == pytest.approx(expected, abs=1e-9)
        assert row["chosen_k_index"] == 0


def test_prefix_columns_monotone(setup):
    harm, refl, data = setup
    report = evaluate(harm, data, "pred", "pred-k", 6, refl, seed=1, prefixes=(1, 3, 6))
    for row in report.rows:
        assert row["fmse_best_of_1"] >= row["fmse_best_of_3"] >= row["fmse_best_of_6"]
        assert row["fmse_best_of_6"] == row["fmse"]
        assert row["harm_diversity"] >= 0 and row["refl_diversity"] >= 0
    assert report.meta == {"mode": "pred", "protocol": "pred-k", "k": 6, "seed": 1, "source": "posterior"}


def test_pred_k1_equals_single(setup):
    harm, refl, data = setup
    a = evaluate(harm, data, "pred", "single", 1, refl, seed=4)
    b = evaluate(harm, data, "pred", "pred-k", 1, refl, seed=4)
    assert [r["fmse"] for r in a.rows] == [r["fmse"] for r in b.rows]


def test_seed_controls_sampling(setup):
    harm, refl, data = setup
    a = evaluate(harm, data, "pred", "pred-k", 3, refl, seed=0)
    b = evaluate(harm, data, "pred", "pred-k", 3, refl, seed=0)
    c = evaluate(harm, data, "pred", "pred-k", 3, refl, seed=1)
    assert a.rows == b.rows and a.rows != c.rows


def test_errors(setup):
    harm, _, data = setup
    with pytest.raises(ConfigurationError):
        evaluate(harm, data, "pred", "pred-k", 3)
    with pytest.raises(ConfigurationError):
        evaluate(harm, data, "gt", "best-guess")
