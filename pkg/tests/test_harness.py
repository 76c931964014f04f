import csv
import json
from dataclasses import replace

import pytest

from admmguard import AttackSpec, BatchConfig, ConfigError, emit_report, run_batch
from admmguard.harness import REPORT_FILES, load_config, replay, run_problem


@pytest.fixture(scope="module")
def small():
    return run_batch(BatchConfig(n_unattacked=6, n_attacked=6))


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_honest_only_population():
    res = run_batch(BatchConfig(n_unattacked=10, n_attacked=0, attack=None))
    assert res.confusion()["unattacked"] == (0, 10, 10)
    assert res.confusion()["attacked"] == (0, 0, 0)


def test_counts_and_rates(small):
    conf = small.confusion()
    for name, size in (("attacked", 6), ("unattacked", 6)):
        d, nd, t = conf[name]
        assert d + nd == t == size
        rd, rnd = small.rates()[name]
        assert rd == d / t and rnd == nd / t
    s = small.summary()
    assert s["completed"] + s["failed"] == s["requested"] == 12


def test_report_files(small, tmp_path):
    paths = emit_report(small, tmp_path)
    assert sorted(p.name for p in paths) == sorted(REPORT_FILES)
    conf = read_csv(tmp_path / "confusion.csv")
    assert conf[0] == ["cohort", "detected", "not_detected", "total"]
    assert [row[3] for row in conf[1:]] == ["6", "6"]
    rows = read_csv(tmp_path / "problems.csv")
    assert rows[0] == ["id", "seed", "n", "m", "p", "attacked", "converged", "iterations", "verdict", "first_detection"]
    assert [int(r[0]) for r in rows[1:]] == list(range(12))
    hist = read_csv(tmp_path / "iterations_histogram.csv")
    assert hist[0] == ["iterations", "count_unattacked", "count_attacked"]
    assert sum(int(r[1]) for r in hist[1:]) == 6 and sum(int(r[2]) for r in hist[1:]) == 6


def test_minimal_batch_renders_one_row(tmp_path):
    res = run_batch(BatchConfig(n_unattacked=1, n_attacked=0, attack=None))
    emit_report(res, tmp_path)
    assert len(read_csv(tmp_path / "problems.csv")) == 2


def test_empty_batch_forbidden():
    with pytest.raises(ConfigError):
        BatchConfig(n_unattacked=0, n_attacked=0)


def test_byte_identical_reruns(tmp_path):
    cfg = BatchConfig(n_unattacked=4, n_attacked=4)
    emit_report(run_batch(cfg), tmp_path / "a")
    emit_report(run_batch(cfg), tmp_path / "b")
    for name in REPORT_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_parallel_matches_serial():
    cfg = BatchConfig(n_unattacked=4, n_attacked=4)
    assert run_batch(cfg).rows == run_batch(replace(cfg, workers=2)).rows


def test_replay_from_results(small, tmp_path):
    emit_report(small, tmp_path)
    assert replay(tmp_path / "results.json").rows == small.rows


def test_single_row_replay(small):
    assert run_problem(small.config, 7) == small.rows[7]


def test_failures_become_rows():
    # a negative margin makes every attacked problem fail
    cfg = BatchConfig(n_unattacked=1, n_attacked=2, attack=AttackSpec("linking_infeasibility", margin=-1.0))
    res = run_batch(cfg)
    assert len(res.rows) == 3 and len(res.failed) == 2
    assert all(r.verdict == "failed" for r in res.failed)
    assert res.confusion()["attacked"] == (0, 2, 2)


def test_unwritable_output(small, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match=str(blocker)):
        emit_report(small, blocker / "sub")


def test_config_file_round_trip(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[batch]\nn_unattacked = 3\nn_attacked = 2\n[attack]\nvector = noise_injection\nmagnitude = 0.2\n"
                   "[detector]\nstrategy = most_recent\n")
    cfg = BatchConfig.from_dict(load_config(ini))
    assert (cfg.n_unattacked, cfg.n_attacked, cfg.attack.magnitude, cfg.detector.strategy) == (3, 2, 0.2, "most_recent")
    assert BatchConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize("data", [
    {"batch": {"bogus": "1"}},
    {"nosuch": {}},
    {"admm": {"rho": "abc"}},
    {"attack": {"vector": "none", "magnitude": "0.2"}},
    {"batch": {"topology": "ring"}},
])
def test_bad_configs(data):
    with pytest.raises(ConfigError):
        BatchConfig.from_dict(data)


def test_chain_topology_runs():
    res = run_batch(BatchConfig(n_unattacked=3, n_attacked=3, topology="chain"))
    assert res.confusion() == {"attacked": (3, 0, 3), "unattacked": (0, 3, 3)}
