import csv
import json
import os

import pytest

from klevel.cli import RunConfig, UsageError, dispatch, main, parse_config


@pytest.fixture(autouse=True)
def _no_env_jobs(monkeypatch):
    monkeypatch.delenv("KLVL_JOBS", raising=False)


def _only_dir(root):
    (name,) = os.listdir(root)
    return os.path.join(root, name)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _run(argv, tmp_path, capsys=None):
    out = tmp_path / "out"
    status = main(list(argv) + ["--outdir", str(out)])
    return status, _only_dir(out)


# --- parsing ------------------------------------------------------------------

def test_seed_count_and_base():
    c = parse_config(["run", "--optimizer", "sgd", "--seed-count", "10", "--seed-base", "7"])
    assert c.seeds == tuple(range(7, 17))


def test_experiment_two_style_run_flags():
    c = parse_config("run --optimizer svmr --levels 10 --batch 128 --eta 0.01 --iters 500 --lf 50".split())
    assert (c.optimizer, c.levels, c.batch, c.eta, c.iters, c.lf) == ("svmr", 10, 128, 0.01, 500, 50.0)
    assert c.beta is not None


def test_missing_optimizer_exit_code(tmp_path, capsys):
    assert main(["run", "--outdir", str(tmp_path)]) == 2
    assert "optimizer" in capsys.readouterr().err


def test_unknown_config_keys_listed(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"optimizer": "sgd", "stepsize": 1, "zzz": 2}))
    with pytest.raises(UsageError, match="stepsize, zzz"):
        parse_config(["run", "--config", str(path)])


def test_flags_override_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"optimizer": "sgd", "eta": 0.5, "seeds": [3, 4]}))
    c = parse_config(["run", "--config", str(path), "--eta", "0.25"])
    assert c.eta == 0.25 and c.optimizer == "sgd" and c.seeds == (3, 4)
    c = parse_config(["run", "--config", str(path), "--seed-count", "2"])
    assert c.seeds == (0, 1)


@pytest.mark.parametrize("argv", [
    ["run", "--optimizer", "sgd", "--schedule", "convex", "--eta", "0.1"],
    ["run", "--optimizer", "sgd", "--seeds", "1,2", "--seed-count", "3"],
    ["sweep-levels", "--k-max", "21"],
    ["sweep-levels", "--k-min", "5", "--k-max", "3"],
    ["run", "--optimizer", "sgd", "--jobs", "0"],
])
def test_usage_errors(argv):
    with pytest.raises(UsageError):
        parse_config(argv)


def test_schedule_conflict_across_sources(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"optimizer": "sgd", "schedule": "convex", "iters": 4}))
    with pytest.raises(UsageError):
        parse_config(["run", "--config", str(path)])
    # a flag of the other source replaces the file's choice
    path.write_text(json.dumps({"optimizer": "sgd", "schedule": "convex"}))
    c = parse_config(["run", "--config", str(path), "--eta", "0.1", "--beta", "0.2", "--iters", "5"])
    assert c.schedule is None and c.iters == 5


def test_deep_allows_large_k():
    assert parse_config(["sweep-levels", "--k-max", "25", "--deep"]).k_max == 25


def test_env_overrides_jobs(monkeypatch):
    monkeypatch.setenv("KLVL_JOBS", "3")
    assert parse_config(["run", "--optimizer", "sgd", "--jobs", "1"]).jobs == 3


def test_noise_range_flags():
    c = parse_config(["sweep-noise", "--var-min", "0.5", "--var-max", "1.0", "--var-step", "0.25"])
    assert c.noise_grid == (0.5, 0.75, 1.0)


def test_config_echo_round_trips(tmp_path):
    c = parse_config("run --optimizer storm --levels 1 --eta 0.02 --beta 0.3 --iters 7 --seeds 2,5".split()
                     + ["--outdir", str(tmp_path / "o")])
    path = tmp_path / "echo.json"
    echo = c.to_json()
    echo.pop("subcommand")
    path.write_text(json.dumps(echo))
    again = parse_config(["run", "--config", str(path)])
    assert again == c and isinstance(again, RunConfig)


# --- dispatch -------------------------------------------------------------------

def test_check_invariants_exit_zero(tmp_path):
    status, out = _run(["check-invariants"], tmp_path)
    assert status == 0
    rows = _read_csv(os.path.join(out, "rows.csv"))
    assert rows and all(r["passed"] == "true" for r in rows)
    assert sorted(os.listdir(out)) == ["config.json", "metadata.json", "rows.csv", "summary.csv"]


def test_stability_example_rows(tmp_path):
    status, out = _run("stability --optimizer storm --n 64 --level 1 --position 3 --seed-count 20 --iters 32".split(),
                       tmp_path)
    assert status == 0
    assert len(_read_csv(os.path.join(out, "rows.csv"))) == 20
    (summary,) = _read_csv(os.path.join(out, "summary.csv"))
    assert float(summary["eps_hat"]) > 0


def test_sweep_levels_point_count(tmp_path):
    argv = "sweep-levels --k-min 1 --k-max 20 --seeds 0 --iters 2 --n 60 --batch 4 --initial-batch 4".split()
    status, out = _run(argv, tmp_path)
    assert status == 0
    assert [int(r["K"]) for r in _read_csv(os.path.join(out, "summary.csv"))] == list(range(1, 21))


def test_run_error_exit_one(tmp_path):
    argv = "run --optimizer sgd --problem quadratic --n 10 --batch 2 --eta 1e300 --beta 1 --iters 5".split()
    status, out = _run(argv, tmp_path)
    assert status == 1
    assert json.loads(open(os.path.join(out, "metadata.json")).read())["error"]


SMALL = {
    "run": "run --optimizer svmr --levels 3 --iters 10 --batch 8 --initial-batch 8 --n 60 --seeds 0,1",
    "stability": "stability --optimizer storm --n 32 --iters 16 --seed-count 4",
    "sweep-levels": "sweep-levels --k-max 3 --seeds 0,1 --iters 5 --n 60 --batch 4 --initial-batch 4",
    "sweep-initial-batch": "sweep-initial-batch --levels 2 --batch-set 4,16 --seeds 0 --iters 8 --n 60 --batch 4",
    "sweep-noise": "sweep-noise --levels 2 --noise-grid 0.5,1 --seeds 0 --iters 5 --n 60 --batch 4 --initial-batch 4",
    "compare-sgd-storm": "compare-sgd-storm --seeds 0,1 --iters 5 --n 60 --batch 4 --initial-batch 4",
    "check-invariants": "check-invariants",
}


@pytest.mark.parametrize("sub", sorted(SMALL))
def test_rerun_byte_identical(sub, tmp_path):
    c = parse_config(SMALL[sub].split() + ["--outdir", str(tmp_path)])
    assert dispatch(c) == 0
    assert dispatch(c) == 0
    a, b = sorted(os.listdir(tmp_path))
    for name in os.listdir(os.path.join(tmp_path, a)):
        if name.endswith(".csv") or name == "config.json":
            with open(os.path.join(tmp_path, a, name), "rb") as fa, open(os.path.join(tmp_path, b, name), "rb") as fb:
                assert fa.read() == fb.read(), name
