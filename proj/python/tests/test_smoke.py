import math

import numpy as np
import pytest

import stylefed as sf


def test_primitives():
    logits = sf.proto_logits(np.array([1.0, 0.0]), np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert logits.shape == (1, 2)
    assert logits[0, 0] == pytest.approx(-2.0)
    assert logits[0, 1] == 0.0
    assert sf.softmax_scaled([math.log(2.0), 0.0]) == pytest.approx([2 / 3, 1 / 3])
    assert sf.cosine_sim([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1 / math.sqrt(2))
    assert sf.layer_norm([1.0, -1.0], [1.0, 1.0], [0.0, 0.0]) == pytest.approx([1.0, -1.0], abs=1e-7)


def test_decompose():
    content, style, coef = sf.decompose([1.0, 1.0], [1.0, 0.0])
    assert content == pytest.approx([1.0, 0.0])
    assert style == pytest.approx([0.0, 1.0])
    assert coef == pytest.approx(1.0)


def test_metrics():
    assert sf.macro_f1([0, 0, 1, 1], [0, 0, 0, 0], 2) == pytest.approx(1 / 3)
    assert sf.brier(np.array([[0.0, 1.0]]), [0]) == pytest.approx(2.0)
    assert sf.wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0] * 6) == pytest.approx(0.03125)
    assert sf.convergence_round([0.1, 0.5, 0.93, 0.95, 1.0], [1, 2, 3, 4, 5]) == 4


def test_errors_map_to_python():
    with pytest.raises(ValueError):
        sf.softmax_scaled([])
    with pytest.raises(sf.ConfigError, match="seed"):
        sf.resolved_config("[data]\nclasses = 3\n")


def test_gaussian_mixture_shapes():
    x, y = sf.gaussian_mixture(3, 4, 5, 2.0, 1)
    assert x.shape == (15, 4)
    assert sorted(set(y)) == [0, 1, 2]


SPEC = """
seed = 2
[data]
classes = 3
input_dim = 4
per_class = 20
[federation]
clients = 3
participation = 1.0
rounds = 2
local_epochs = 1
eval_interval = 1
[model]
feature_dim = 4
hidden = [8]
[aggregator]
heads = 2
"""


def test_run_and_compare(tmp_path):
    summary = sf.run(SPEC, tmp_path / "run")
    assert (tmp_path / "run" / "metrics.csv").read_text().startswith("round,mean_acc")
    assert 0.0 <= summary["best_accuracy"]["value"] <= 1.0
    cfg = sf.resolved_config(SPEC)
    assert cfg["seed"] == 2
    cmp = sf.compare(SPEC, ["full", "uniform_average"], tmp_path / "cmp")
    assert (tmp_path / "cmp" / "pairs.csv").exists()
    assert isinstance(cmp, dict)
