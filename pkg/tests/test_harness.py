import copy
import json
import os

import numpy as np
import pytest
import yaml

from mmdfw.discrepancy import ReferenceSamples, WeightedParticles, mmd2_vs_samples
from mmdfw.fw import FWRunError
from mmdfw.harness import (ConfigError, ExperimentFailed, FormatError, ResultTable, atomic_write, eval_mmd_curve,
                           load_config, parse_config, read_particles, read_results, read_samples, run_experiment,
                           write_particles, write_samples)
from mmdfw.harness import cli, runner
from mmdfw.kernels import RBF

GMM = {"family": "gmm", "preset": "toy11"}


def base(**over):
    raw = {"seed": 0, "target": GMM, "kernel": {"type": "rbf", "bandwidth": 0.3},
           "method": {"name": "mmd-fw", "n_particles": 4, "lmo": {"inner_iterations": 20}},
           "reference": {"source": "exact", "n_samples": 500},
           "output": {"results": "results.csv", "particles": "particles.csv"}}
    raw.update(over)
    return copy.deepcopy(raw)


def write_cfg(tmp_path, raw, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(raw))
    return p


@pytest.mark.parametrize("edit", [
    lambda r: r.update(extra=1),
    lambda r: r["method"].update(name="nuts"),
    lambda r: r["kernel"].update(alpha=1.0),
    lambda r: r["target"].update(mean=[0.0]),
    lambda r: r.update(kernel={"type": "rff", "bandwidth": "median"}),
    lambda r: r.update(method={"name": "herding", "n_particles": 3}, reference=None) or r.pop("reference"),
    lambda r: r["method"].update(step_rule="constant", name="svgd"),
    lambda r: r["method"].update(blocks=[[0], [1]], name="cache-mmd-fw"),
    lambda r: r.update(evaluation={"test_metric": "accuracy"}),
    lambda r: r.update(reference={"source": "file"}),
    lambda r: r.pop("output"),
    lambda r: r["method"].update(n_particles=0),
])
def test_invalid_configs_are_rejected(edit):
    raw = base()
    edit(raw)
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_unreadable_and_malformed_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [1,\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_json_config_is_accepted(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(base()))
    assert load_config(p).method["n_particles"] == 4


def test_particle_file_round_trip(tmp_path, rng):
    P = WeightedParticles(rng.normal(size=(5, 3)), rng.normal(size=5))
    write_particles(tmp_path / "p.csv", P, {"seed": 3})
    Q, meta = read_particles(tmp_path / "p.csv")
    assert np.array_equal(P.points, Q.points) and np.array_equal(P.weights, Q.weights)
    assert meta["seed"] == 3 and meta["dim"] == 3 and meta["n"] == 5


def test_sample_file_round_trip(tmp_path, rng):
    S = rng.normal(size=(7, 2)) * 1e-7
    write_samples(tmp_path / "s.csv", S, {"source": "exact"})
    R, meta = read_samples(tmp_path / "s.csv")
    assert np.array_equal(R.samples, S) and meta["source"] == "exact"


def test_result_table_round_trip(tmp_path):
    t = ResultTable()
    t.add(iteration=0, n_particles=1, mmd2=0.1 + 0.2, wallclock_ms=3.5)
    t.add(iteration=1, n_particles=2, mmd2=1e-300, ksd=2.0)
    t.failure = "stopped\nearly"
    atomic_write(tmp_path / "r.csv", t.to_csv())
    back = read_results(tmp_path / "r.csv")
    assert back.rows == t.rows and back.failure == "stopped early"
    with pytest.raises(KeyError):
        t.add(speed=1)


@pytest.mark.parametrize("text", [
    "",
    "no metadata\n",
    '# {"format":"mmdfw-samples","version":1,"dim":2,"n":1}\nx0,x1\n1.0\n',
    '# {"format":"mmdfw-samples","version":1,"dim":1,"n":2}\nx0\n1.0\n',
    '# {"format":"mmdfw-samples","version":1,"dim":1,"n":1}\nx0\nabc\n',
    '# {"format":"other","dim":1,"n":1}\nx0\n1.0\n',
])
def test_malformed_sample_files(tmp_path, text):
    p = tmp_path / "s.csv"
    p.write_text(text)
    with pytest.raises(FormatError):
        read_samples(p)


def test_particle_file_index_check(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text('# {"format":"mmdfw-particles","version":1,"dim":1,"n":2}\nindex,weight,x0\n0,0.5,1.0\n2,0.5,2.0\n')
    with pytest.raises(FormatError):
        read_particles(p)


def test_atomic_write_keeps_old_file_on_failure(tmp_path, monkeypatch):
    p = tmp_path / "r.csv"
    p.write_text("old\n")

    def boom(*a):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(p, "new\n")
    assert p.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["r.csv"]


def test_single_particle_run_has_one_row(tmp_path):
    for target in (GMM, {"family": "gaussian", "mean": [0.0, 1.0]},
                   {"family": "logreg", "data": {"synthetic": {"n": 100, "d": 2}}}):
        raw = base(target=target)
        raw["method"]["n_particles"] = 1
        if target["family"] == "logreg":
            raw["reference"] = {"source": "hmc", "n_samples": 200, "hmc": {"burn_in": 50}}
        out = run_experiment(load_config(write_cfg(tmp_path, raw)))
        rows = read_results(tmp_path / "results.csv").rows
        assert len(rows) == 1 and rows[0]["n_particles"] == 1 and out.particles.n == 1


def test_runs_are_byte_identical(tmp_path):
    outs = []
    for sub in ("a", "b"):
        d = tmp_path / sub
        d.mkdir()
        run_experiment(load_config(write_cfg(d, base())))
        outs.append(((d / "results.csv").read_bytes(), (d / "particles.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_results_columns_and_clock(tmp_path):
    raw = base(output={"results": "r.csv", "wallclock": True})
    run_experiment(load_config(write_cfg(tmp_path, raw)))
    rows = read_results(tmp_path / "r.csv").rows
    assert [r["n_particles"] for r in rows] == [1, 2, 3, 4]
    clocks = [r["wallclock_ms"] for r in rows]
    assert clocks == sorted(clocks)
    assert all(r["mmd2"] is not None and r["theorem1_residual"] is not None for r in rows)


def test_output_dir_override(tmp_path, monkeypatch):
    out = tmp_path / "out"
    monkeypatch.setenv("MMDFW_OUTPUT_DIR", str(out))
    run_experiment(load_config(write_cfg(tmp_path, base())))
    assert (out / "results.csv").exists() and not (tmp_path / "results.csv").exists()


@pytest.mark.parametrize("rule", ["empirical-bq", "constant", "line-search"])
@pytest.mark.parametrize("bw", [0.3, "median"])
def test_eval_reproduces_run_mmd(tmp_path, rule, bw):
    raw = base(kernel={"type": "rbf", "bandwidth": bw},
               output={"results": "r.csv", "particles": "p.csv", "reference": "ref.csv"},
               evaluation={"kernel": {"type": "rbf", "bandwidth": 0.3}})
    raw["method"]["step_rule"] = rule
    run_experiment(load_config(write_cfg(tmp_path, raw)))
    table = eval_mmd_curve(tmp_path / "p.csv", tmp_path / "ref.csv", {"type": "rbf", "bandwidth": 0.3})
    run_rows = read_results(tmp_path / "r.csv").rows
    assert len(table.rows) == len(run_rows)
    for a, b in zip(table.rows, run_rows):
        assert abs(a["mmd2"] - b["mmd2"]) < 1e-10


def test_eval_against_own_particles_is_zero(tmp_path):
    raw = base(method={"name": "herding", "n_particles": 5}, output={"results": "r.csv", "particles": "p.csv"})
    run_experiment(load_config(write_cfg(tmp_path, raw)))
    table = eval_mmd_curve(tmp_path / "p.csv", tmp_path / "p.csv", {"type": "rbf", "bandwidth": 0.5})
    assert abs(table.rows[-1]["mmd2"]) < 1e-12


def test_eval_dimension_mismatch(tmp_path, rng):
    write_particles(tmp_path / "p.csv", WeightedParticles.uniform(rng.normal(size=(3, 2))), {})
    write_samples(tmp_path / "s.csv", rng.normal(size=(5, 1)))
    with pytest.raises(ConfigError):
        eval_mmd_curve(tmp_path / "p.csv", tmp_path / "s.csv", {"type": "rbf", "bandwidth": 1.0})


@pytest.mark.parametrize("method", [
    {"name": "svgd", "n_particles": 5, "svgd": {"iterations": 20, "record_every": 5}},
    {"name": "stein-points", "n_particles": 4},
    {"name": "herding", "n_particles": 4, "herding": {"pool_size": 100, "rule": "mmd"}},
    {"name": "cache-mmd-fw", "n_particles": 4, "svgd": {"iterations": 20}},
    {"name": "mmd-fw", "n_particles": 3, "blocks": [[0], [1]]},
])
def test_every_method_runs(tmp_path, method):
    raw = base(method=method, evaluation={"ksd": True})
    if method["name"] == "stein-points":
        raw["kernel"] = {"type": "imq"}
    out = run_experiment(load_config(write_cfg(tmp_path, raw)))
    rows = read_results(tmp_path / "results.csv").rows
    assert rows and all(r["mmd2"] is not None and r["ksd"] is not None for r in rows)
    if method["name"] == "svgd":
        assert [r["iteration"] for r in rows] == [5, 10, 15, 20]
    else:
        assert len(rows) == method["n_particles"] == out.particles.n


def test_predictive_metrics(tmp_path):
    data = {"synthetic": {"n": 120, "d": 2, "seed": 1}}
    raw = base(target={"family": "logreg", "data": data}, reference=None)
    raw.pop("reference")
    run_experiment(load_config(write_cfg(tmp_path, raw)))
    acc = [r["test_metric"] for r in read_results(tmp_path / "results.csv").rows]
    assert all(0 <= a <= 1 for a in acc)
    raw = base(target={"family": "bnn", "hidden": 3, "data": {"synthetic": {"n": 60}}},
               evaluation={"test_metric": "log-likelihood"})
    raw.pop("reference")
    raw["method"]["n_particles"] = 2
    run_experiment(load_config(write_cfg(tmp_path, raw)))
    assert all(np.isfinite(r["test_metric"]) for r in read_results(tmp_path / "results.csv").rows)


def test_dataset_file_split(tmp_path, rng):
    X = rng.normal(size=(40, 2))
    y = (X[:, 0] > 0).astype(int)
    lines = ["a,b,label"] + [f"{float(a)!r},{float(b)!r},{c}" for (a, b), c in zip(X, y)]
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    built = runner.build_target({"family": "logreg", "data": {"path": "d.csv", "test_fraction": 0.25}}, tmp_path)
    assert built.test_X.shape == (10, 2) and built.target.X.shape[0] == 30
    with pytest.raises(ConfigError):
        runner.build_target({"family": "logreg", "data": {"path": "nope.csv"}}, tmp_path)


def test_failure_writes_partial_results(tmp_path, monkeypatch):
    real = runner.mmd_fw

    def failing(target, kernel, n, *a, **kw):
        raise FWRunError("lmo diverged", real(target, kernel, 2, *a, **kw))

    monkeypatch.setattr(runner, "mmd_fw", failing)
    with pytest.raises(ExperimentFailed):
        run_experiment(load_config(write_cfg(tmp_path, base())))
    table = read_results(tmp_path / "results.csv")
    assert table.failure == "lmo diverged" and len(table.rows) == 2
    assert read_particles(tmp_path / "particles.csv")[0].n == 2


def test_cli_run_eval_and_sample(tmp_path, capsys):
    raw = base(output={"results": "r.csv", "particles": "p.csv", "reference": "ref.csv"})
    assert cli.main(["run", str(write_cfg(tmp_path, raw))]) == 0
    (tmp_path / "k.yaml").write_text("kernel:\n  type: rbf\n  bandwidth: 0.3\n")
    assert cli.main(["eval", str(tmp_path / "p.csv"), str(tmp_path / "ref.csv"), str(tmp_path / "k.yaml"),
                     "-o", str(tmp_path / "e.csv")]) == 0
    assert len(read_results(tmp_path / "e.csv").rows) == 4
    (tmp_path / "t.yaml").write_text("family: gaussian\nmean: [0.0, 0.0]\n")
    (tmp_path / "h.yaml").write_text("n_samples: 50\nburn_in: 10\n")
    assert cli.main(["sample", str(tmp_path / "t.yaml"), str(tmp_path / "h.yaml"), "-o", str(tmp_path / "s.csv")]) == 0
    S, meta = read_samples(tmp_path / "s.csv")
    assert S.n == 50 and 0 <= meta["acceptance_rate"] <= 1


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = base()
    bad["method"]["name"] = "nuts"
    assert cli.main(["run", str(write_cfg(tmp_path, bad, "bad.yaml"))]) == 1
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 1
    (tmp_path / "k.yaml").write_text("type: rbf\nbandwidth: 1.0\n")
    assert cli.main(["eval", str(tmp_path / "none.csv"), str(tmp_path / "none.csv"), str(tmp_path / "k.yaml")]) == 1
    (tmp_path / "junk.csv").write_text("junk\n")
    assert cli.main(["eval", str(tmp_path / "junk.csv"), str(tmp_path / "junk.csv"), str(tmp_path / "k.yaml")]) == 1

    def failing(cfg):
        raise ExperimentFailed("diverged", None)

    monkeypatch.setattr(cli, "run_experiment", failing)
    assert cli.main(["run", str(write_cfg(tmp_path, base()))]) == 2


def test_reference_file_source(tmp_path):
    S = np.random.default_rng(0).normal(size=(300, 2))
    write_samples(tmp_path / "gold.csv", S)
    raw = base(reference={"source": "file", "path": "gold.csv"})
    out = run_experiment(load_config(write_cfg(tmp_path, raw)))
    expected = mmd2_vs_samples(RBF(0.3), out.particles, ReferenceSamples(S))
    assert read_results(tmp_path / "results.csv").rows[-1]["mmd2"] == pytest.approx(expected, abs=1e-12)
