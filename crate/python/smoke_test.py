"""Smoke test for the sfprompt extension module.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import sfprompt


def main() -> int:
    base = sfprompt.CostParams.preset("vit-base")
    assert base.fl()[1] == 3910.0
    assert sfprompt.CostParams.preset("vit-large").fl()[1] == 12430.0

    w_star = base.crossover_model_size()
    at = base.with_model_size(w_star)
    assert math.isclose(at.fl()[1], at.sfprompt()[1], rel_tol=1e-9)

    rows = base.sweep("rounds", [1.0, 2.0, 3.0])
    assert len(rows) == 9 and rows[0][0] == "FL"

    assert sfprompt.el2n_score([0.0, 1.0, 0.0], 1) == 0.0
    assert math.isclose(sfprompt.el2n_score([0.25] * 4, 2), math.sqrt(0.75), abs_tol=1e-12)
    assert sfprompt.prune_indices([0.1, 0.9, 0.5, 0.9], 0.5) == [1, 3]
    assert sfprompt.aggregate([[1.0], [3.0]], [1, 3]) == [2.5]
    assert sfprompt.select_clients(5, 5, 1, 0) == [0, 1, 2, 3, 4]

    defaults = json.loads(sfprompt.default_config())
    assert defaults["n_clients"] == 50 and defaults["clients_per_round"] == 5
    try:
        sfprompt.validate_config('{"prune_fraction": 1.5}')
    except ValueError as e:
        assert "prune_fraction" in str(e)
    else:
        raise AssertionError("invalid config accepted")

    config = json.dumps({
        "model": {"seq_len": 8, "d_model": 16, "n_layers": 4, "n_classes": 4, "input_dim": 8},
        "n_clients": 8, "clients_per_round": 2, "rounds": 3, "local_epochs": 2,
        "batch_size": 16, "lr_local": 0.05,
        "data": {"n_train": 400, "n_test": 100, "class_separation": 5.0},
    })
    result = sfprompt.run_training(config)
    assert len(result.reports) == 3
    assert 0.0 <= result.final_accuracy <= 1.0
    again = sfprompt.run_training(config)
    assert [r.test_accuracy for r in again.reports] == [r.test_accuracy for r in result.reports]
    assert len(sfprompt.config_costs(config)) == 3

    with tempfile.TemporaryDirectory() as d:
        acc = sfprompt.run_to_dir(config, d)
        assert acc == result.final_accuracy
        assert (Path(d) / "rounds.csv").exists() and (Path(d) / "model.ckpt").exists()

    print(f"sfprompt smoke test ok: final accuracy {result.final_accuracy:.3f}, "
          f"round 1 traffic {result.reports[0].bytes_up + result.reports[0].bytes_down} bytes")
    return 0


if __name__ == "__main__":
    sys.exit(main())
