import csv
import json
import os
from pathlib import Path

import pytest

from evoopt import cli, generator
from evoopt.config import ConfigError, parse_config

SMALL_SCHEDULE = """
seed = 5
[evolution]
generations_budget = {budget}
num_islands = 2
checkpoint_every = 2
migration_interval = 3
[task]
domain = "SCHEDULE"
synthetic_seeds = [0, 1, 2]
[workload]
n_creates = 200
"""


def write(tmp_path, text, name="exp.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def tree(root):
    return sorted(str(p.relative_to(root)) for p in Path(root).rglob("*"))


def test_evolve_admm_toy_task(tmp_path):
    cfg = write(tmp_path, 'seed = 42\n[task]\ndomain = "ADMM_PENALTY"\n')
    assert cli.main(["evolve", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    curve = rows(tmp_path / "out" / "curve.csv")
    assert curve[0] == ["generation", "best_fitness", "mean_fitness"]
    assert [int(r[0]) for r in curve[1:]] == list(range(1, 31))
    best = [float(r[1]) for r in curve[1:]]
    assert all(a <= b for a, b in zip(best, best[1:]))
    for name in ("checkpoint.json", "best_genome.txt", "archive.csv"):
        assert (tmp_path / "out" / name).exists()


def test_llm_without_credentials_exits_3(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(generator.API_KEY_ENV, raising=False)
    cfg = write(tmp_path, '[generator]\nkind = "llm"\nbase_url = "http://127.0.0.1:9"\n')
    assert cli.main(["evolve", "--config", cfg, "--out", str(tmp_path / "out")]) == 3
    assert "MissingCredentials" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_llm_without_endpoint_is_config_error(tmp_path, monkeypatch):
    monkeypatch.setenv(generator.API_KEY_ENV, "k")
    cfg = write(tmp_path, '[generator]\nkind = "llm"\n')
    assert cli.main(["evolve", "--config", cfg, "--out", str(tmp_path / "out")]) == 2


def test_dead_generator_exits_3_with_checkpoint(tmp_path, monkeypatch):
    monkeypatch.setenv(generator.API_KEY_ENV, "k")
    cfg = write(tmp_path, SMALL_SCHEDULE.format(budget=10) + """
[generator]
kind = "llm"
base_url = "http://127.0.0.1:9"
max_retries = 0
timeout = 2.0
requests_per_minute = 0
""")
    assert cli.main(["evolve", "--config", cfg, "--out", str(tmp_path / "out")]) == 3
    doc = json.loads((tmp_path / "out" / "checkpoint.json").read_text())
    assert doc["generation"] == 3 and doc["stats"]["generation_errors"] == 6


def test_resume_matches_uninterrupted_run(tmp_path):
    straight, split = tmp_path / "straight", tmp_path / "split"
    full = write(tmp_path, SMALL_SCHEDULE.format(budget=8), "full.toml")
    short = write(tmp_path, SMALL_SCHEDULE.format(budget=5), "short.toml")
    assert cli.main(["evolve", "--config", full, "--out", str(straight)]) == 0
    assert cli.main(["evolve", "--config", short, "--out", str(split)]) == 0
    assert cli.main(["resume", "--config", full, "--out", str(split)]) == 0
    for name in ("checkpoint.json", "best_genome.txt", "archive.csv", "curve.csv"):
        assert (straight / name).read_bytes() == (split / name).read_bytes(), name


def test_resume_rejects_mismatch_and_missing(tmp_path):
    cfg = write(tmp_path, SMALL_SCHEDULE.format(budget=2))
    out = str(tmp_path / "out")
    assert cli.main(["resume", "--config", cfg, "--out", out]) == 2
    assert cli.main(["evolve", "--config", cfg, "--out", out]) == 0
    assert cli.main(["resume", "--config", cfg, "--out", out, "--seed", "6"]) == 2
    ck = tmp_path / "out" / "checkpoint.json"
    ck.write_bytes(ck.read_bytes()[:100])
    assert cli.main(["resume", "--config", cfg, "--out", out]) == 2


def test_bad_seed_program_is_config_error(tmp_path):
    cfg = write(tmp_path, '[evolution]\nseed_programs = ["beta"]\n')  # beta is not a placement variable
    assert cli.main(["evolve", "--config", cfg, "--out", str(tmp_path / "out")]) == 2


def test_simulate_two_policies_one_scenario(tmp_path):
    cfg = write(tmp_path, "[workload]\nn_creates = 300\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    table = rows(tmp_path / "out" / "simulate.csv")
    assert table[0] == ["scenario", "num_servers", "policy", "scheduling_length"]
    assert [r[2] for r in table[1:]] == ["best_fit", "first_fit"]


def test_simulate_genome_scenario_major(tmp_path):
    (tmp_path / "g.txt").write_text("(0.0 - bin_util)\n")
    cfg = write(tmp_path, """
[simulate]
policies = ["genome:g.txt", "best_fit"]
synthetic_seeds = [1, 2, 3, 4, 5]
[workload]
n_creates = 200
""")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    table = rows(tmp_path / "out" / "simulate.csv")[1:]
    assert len(table) == 10
    assert [r[0] for r in table] == [f"synthetic-{s}" for s in range(1, 6) for _ in range(2)]
    assert [r[2] for r in table[:2]] == ["genome:g.txt", "best_fit"]


def test_simulate_cluster_sizes_and_trace_files(tmp_path):
    (tmp_path / "t.csv").write_text("vm_id,event_index,kind,cpu_cores,mem_gb\n" +
                                    "".join(f"{i},{i},create,16,32\n" for i in range(10)))
    cfg = write(tmp_path, '[simulate]\ntraces = ["t.csv"]\nnum_servers = [1, 3]\n')
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    table = rows(tmp_path / "out" / "simulate.csv")[1:]
    assert [(r[0], r[1], r[3]) for r in table] == [("t", "1", "2"), ("t", "1", "2"), ("t", "3", "6"), ("t", "3", "6")]


def test_simulate_missing_trace_writes_nothing(tmp_path):
    cfg = write(tmp_path, '[simulate]\ntraces = ["missing.csv"]\n')
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out" / "simulate.csv").exists()


def test_simulate_is_deterministic(tmp_path):
    cfg = write(tmp_path, "seed = 3\n[workload]\nn_creates = 200\n")
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "simulate.csv").read_bytes() == (tmp_path / "b" / "simulate.csv").read_bytes()


def identity_problem(tmp_path):
    doc = {"kind": "lasso", "M": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "y": [3, 0.5, -2], "lambda1": 1.0}
    (tmp_path / "ident.json").write_text(json.dumps(doc))


def test_solve_fixed_vs_residual_balancing(tmp_path):
    identity_problem(tmp_path)
    cfg = write(tmp_path, '[solve]\nproblems = ["ident.json"]\n')
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    table = rows(tmp_path / "out" / "solve.csv")
    assert table[0] == ["problem", "strategy", "iterations", "converged", "objective"]
    (fixed, rb) = table[1:]
    assert fixed[:2] == ["ident", "fixed"] and rb[:2] == ["ident", "residual_balancing"]
    assert fixed[3] == rb[3] == "True"
    assert int(rb[2]) <= int(fixed[2]) + 5


def test_solve_transfers_rule_to_other_family(tmp_path):
    (tmp_path / "rule.txt").write_text("(if d > (10.0 * p) then (beta * 2.0) else beta)\n")
    cfg = write(tmp_path, """
[solve]
strategies = ["rule:rule.txt", "fixed"]
synthetic_seeds = [1, 2]
[problems]
kind = "elasticnet"
m = 15
n = 20
""")
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    table = rows(tmp_path / "out" / "solve.csv")[1:]
    assert [r[1] for r in table] == ["rule:rule.txt", "fixed"] * 2
    assert all(r[0].startswith("elasticnet") for r in table)


@pytest.mark.parametrize("body", [
    "[solve]\ntol_abs = 0.0\n",
    "[solve]\ntol_rel = -1e-4\n",
    '[solve]\nstrategies = ["magic"]\n',
    '[solve]\nproblems = ["nope.json"]\n',
])
def test_solve_config_errors(tmp_path, body):
    cfg = write(tmp_path, body)
    assert cli.main(["solve", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out" / "solve.csv").exists()


@pytest.mark.parametrize("body", [
    "bogus = 1\n",
    "[evolution]\nnum_islands = \"four\"\n",
    "[evolution]\nnum_islands = 0\n",
    "[task]\ndomain = \"CHESS\"\n",
    "this is = = not toml",
    "[workload]\ncpu_choices = []\n",
])
def test_evolve_config_errors(tmp_path, body):
    assert cli.main(["evolve", "--config", write(tmp_path, body), "--out", str(tmp_path / "out")]) == 2


def test_missing_config_file(tmp_path):
    assert cli.main(["simulate", "--config", str(tmp_path / "none.toml")]) == 2


def test_dotted_keys_equal_tables():
    a = parse_config("[evolution]\nnum_islands = 2\nexploration_epsilon = 0\n")
    b = parse_config("evolution.num_islands = 2\nevolution.exploration_epsilon = 0\n")
    assert a.values == b.values and a["evolution.exploration_epsilon"] == 0.0
    with pytest.raises(ConfigError):
        parse_config("evolution.num_islands = true\n")


def test_writes_stay_inside_output_dir(tmp_path):
    identity_problem(tmp_path)
    cfg = write(tmp_path, SMALL_SCHEDULE.format(budget=2) + '[solve]\nproblems = ["ident.json"]\n')
    before = tree(tmp_path)
    cwd_before = tree(os.getcwd())
    for cmd in ("evolve", "simulate", "solve", "resume"):
        assert cli.main([cmd, "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    after = [p for p in tree(tmp_path) if not p.startswith("out")]
    assert after == before
    assert tree(os.getcwd()) == cwd_before
    assert not any(p.endswith(".tmp") for p in tree(tmp_path / "out"))


def test_output_dir_from_config_is_relative_to_config(tmp_path):
    cfg = write(tmp_path, 'output_dir = "results"\n[workload]\nn_creates = 100\n')
    assert cli.main(["simulate", "--config", cfg]) == 0
    assert (tmp_path / "results" / "simulate.csv").exists()
