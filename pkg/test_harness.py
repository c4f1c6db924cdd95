#!/usr/bin/env python3
"""
Test experiment harness: config, runner, fits, reports, loggers and CLI handlers
"""

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from pathlib import Path

# Add scripts to path
sys.path.insert(0, str(Path(__file__).parent / "scripts"))

import pytest

from config import (RECORD_COLUMNS, ExperimentConfig, ExperimentRecord, load_config, load_records,
                    save_config, worker_count)
from experiments import (ExperimentRunner, ScalingFit, fit_loglog, iso_trial, mp_soundness, torus_trial)
from logger import ExperimentRegistry, RunActivityLog
from report import MixedVersionError, write_report


def read_csv(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.reader(f))


def record(kind="scaling", N=6, stream=0, t_mix=10, version="rangemix-1.0.0"):
    return ExperimentRecord(kind=kind, d=3, N=N, u=1.0, seed=0, stream=stream, V=20, E=25,
                            t_mix=t_mix, method="exact-spectral", code_version=version)


def test_config_validation():
    bad = [
        {"kind": "scaling", "d": 2, "N": [6, 8]},
        {"kind": "scaling", "N": [8, 6]},
        {"kind": "scaling", "N": [1, 6]},
        {"kind": "scaling", "N": [6, 8], "u": 0},
        {"kind": "scaling", "N": [6, 8], "seed": -1},
        {"kind": "scaling", "N": [6, 8], "trials": 5},
        {"kind": "iso", "N": [6], "rmax": 9},
        {"kind": "iso", "N": [6], "mu": 1.0},
        {"kind": "iso", "N": [6], "colour": "red"},
        {"kind": "mixing", "N": [6]},
    ]
    for data in bad:
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate(data)

    cfg = ExperimentConfig(kind="density", N=[6], u=0.5)
    assert cfg.u_values == [0.5]
    assert cfg.admissible_mu == 1 - 1 / 12
    assert cfg.torus(6).walk_length == 108
    assert cfg.with_seed(5).seed == 5
    assert cfg.with_seed(None) is cfg


def test_config_round_trip():
    cfg = ExperimentConfig(kind="iso", N=[6, 8], trials=3, seed=2 ** 63, mp_constant=1.5)
    with tempfile.TemporaryDirectory() as tmp:
        path = save_config(cfg, Path(tmp) / "nested" / "cfg.json")
        assert load_config(path) == cfg
        with pytest.raises(OSError):
            load_config(Path(tmp) / "missing.json")


def test_worker_count_respects_env():
    previous = os.environ.get("RANGEMIX_THREADS")
    try:
        os.environ["RANGEMIX_THREADS"] = "2"
        assert worker_count(8) == 2
        assert worker_count(1) == 1
        os.environ["RANGEMIX_THREADS"] = "many"
        with pytest.raises(ValueError):
            worker_count(4)
    finally:
        if previous is None:
            os.environ.pop("RANGEMIX_THREADS", None)
        else:
            os.environ["RANGEMIX_THREADS"] = previous


def test_record_row_blanks():
    row = ExperimentRecord(kind="density", d=3, N=6, u=1.0, seed=1, V=50, density=0.23).row()
    assert len(row) == len(RECORD_COLUMNS)
    assert row[RECORD_COLUMNS.index("t_mix")] == ""
    assert row[RECORD_COLUMNS.index("V")] == 50


def test_fit_on_exact_power_law():
    fit = fit_loglog({2: [8.0], 4: [32.0], 8: [128.0, 128.0]}, resamples=50, cls=ScalingFit)
    assert abs(fit.slope - 2.0) < 1e-9
    assert abs(fit.ci[0] - 2.0) < 1e-9 and abs(fit.ci[1] - 2.0) < 1e-9
    assert fit.covers(2.0)
    assert fit.counts == [1, 1, 2]
    with pytest.raises(ValueError):
        fit_loglog({4: [10.0]})
    with pytest.raises(ValueError):
        fit_loglog({4: [10.0], 8: [0.0]})


def test_torus_trial_exact_value():
    result = torus_trial((3, 4, 4000))
    assert result.t_mix == 18
    assert result.V == 64 and result.E == 192


def test_iso_trial_is_deterministic():
    task = (3, 6, 1.0, 3, 0, 4, 1 - 1 / 12, None, 4000, 4000)
    first, second = iso_trial(task), iso_trial(task)
    assert first.gamma_hat == second.gamma_hat > 0
    assert first.t_mix == second.t_mix
    assert first.mp_bound is None
    assert first.profile["mp_integral"] > 0
    bounded = iso_trial(task[:7] + (2.0,) + task[8:])
    assert bounded.mp_bound == math.ceil(2.0 * bounded.profile["mp_integral"])


def test_mp_soundness_calibrates_on_held_out():
    records = [record(stream=i, t_mix=t) for i, t in enumerate([10, 20, 30])]
    for r, integral in zip(records, [5.0, 5.0, 20.0]):
        r.profile = {"mp_integral": integral}
    result = mp_soundness(records)
    assert result["constant"] == 2.0
    assert result["instances"] == 2
    assert result["sound_fraction"] == 0.5
    assert mp_soundness(records[:1]) is None


def test_torus_control_slope():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig(kind="torus_control", N=[6, 8, 10, 12], workers=1,
                               output_dir=str(Path(tmp) / "out"))
        result = ExperimentRunner(log_dir=Path(tmp) / "logs", progress=False).run(cfg)
        assert result['success'], result.get('error')
        assert result['experiment_id'] == "E001"
        assert 1.8 <= result['fit'].slope <= 2.1
        out = Path(tmp) / "out" / "E001"
        for name in ("config.json", "records.jsonl", "records.csv", "records.xlsx", "summary.json"):
            assert (out / name).exists()
        rows = read_csv(out / "records.csv")
        assert rows[0] == RECORD_COLUMNS
        assert [int(r[2]) for r in rows[1:]] == [6, 8, 10, 12]


def test_scaling_run_is_reproducible_across_workers():
    with tempfile.TemporaryDirectory() as tmp:
        runner = ExperimentRunner(log_dir=Path(tmp) / "logs", progress=False)
        results = []
        for workers in (1, 2):
            cfg = ExperimentConfig(kind="scaling", N=[4, 5], u=0.5, trials=10, seed=9, workers=workers,
                                   output_dir=str(Path(tmp) / "out"))
            results.append(runner.run(cfg))
        assert all(r['success'] for r in results)
        assert [r['experiment_id'] for r in results] == ["E001", "E002"]
        serial, parallel = ([(r.N, r.stream, r.V, r.t_mix) for r in res['records']] for res in results)
        assert serial == parallel
        assert len(serial) == 20
        on_disk = load_records(Path(tmp) / "out" / "E001" / "records.jsonl")
        assert [(r.N, r.stream, r.V, r.t_mix) for r in on_disk] == serial
        assert len(read_csv(Path(tmp) / "out" / "E001" / "records.csv")) == 21


def test_iso_study_without_trials_writes_header_only():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig(kind="iso", N=[6], trials=0, workers=1, output_dir=str(Path(tmp) / "out"))
        result = ExperimentRunner(log_dir=Path(tmp) / "logs", progress=False).run(cfg)
        assert result['success']
        assert result['records'] == []
        assert read_csv(Path(result['files']['csv'])) == [RECORD_COLUMNS]


def test_single_side_scaling_fails():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig(kind="scaling", N=[6], trials=10, output_dir=str(Path(tmp) / "out"))
        runner = ExperimentRunner(log_dir=Path(tmp) / "logs", progress=False)
        result = runner.run(cfg)
        assert not result['success']
        assert "at least 2" in result['error']
        assert result['experiment_id'] is None
        assert runner.activity_log.rows()[-1]['Status'] == "Error"


def test_density_study():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = ExperimentConfig(kind="density", N=[6], u_values=[0.5, 1.0], trials=3, workers=1,
                               output_dir=str(Path(tmp) / "out"))
        runner = ExperimentRunner(log_dir=Path(tmp) / "logs", progress=False)
        result = runner.run_density(cfg, green_precision=0.05)
        assert result['success'], result.get('error')
        assert len(result['records']) == 6
        assert [row['u'] for row in result['density']] == [0.5, 1.0]
        for r in result['records']:
            assert 0 < r.density <= 1
        summary = json.loads(Path(result['files']['summary']).read_text(encoding='utf-8'))
        assert summary['green']['g00'] == result['green'].value


def test_report_outputs():
    with tempfile.TemporaryDirectory() as tmp:
        files = write_report([], Path(tmp) / "empty")
        assert read_csv(files['csv']) == [RECORD_COLUMNS]

        files = write_report([record()], Path(tmp) / "one")
        rows = read_csv(files['csv'])
        assert len(rows) == 2 and rows[1][0] == "scaling"

        mixed = [record(kind="scaling", N=8), record(kind="iso", N=6), record(kind="scaling", N=6)]
        files = write_report(mixed, Path(tmp) / "mixed")
        assert [r[2] for r in read_csv(files['csv_scaling'])[1:]] == ["6", "8"]
        assert len(read_csv(files['csv_iso'])) == 2
        assert read_csv(files['csv'])[1][0] == "iso"

        versions = [record(), record(version="rangemix-0.9.0")]
        with pytest.raises(MixedVersionError):
            write_report(versions, Path(tmp) / "versions")
        files = write_report(versions, Path(tmp) / "versions", allow_mixed_versions=True, excel=False)
        data = json.loads(Path(files['json']).read_text(encoding='utf-8'))
        assert data['code_versions'] == ["rangemix-0.9.0", "rangemix-1.0.0"]
        assert 'excel' not in files


def test_logger_ids():
    with tempfile.TemporaryDirectory() as tmp:
        registry = ExperimentRegistry(tmp)
        assert registry.add_experiment(kind="scaling") == "E001"
        assert registry.add_experiment(kind="iso") == "E002"
        registry.update_status("E002", "Complete", "done")
        rows = RunActivityLog(tmp).rows()
        assert rows[-1]['Experiment_ID'] == "E002"
        assert rows[-1]['Action'] == "Status Update: Complete"


def test_cli_sample_and_mix():
    import rangemix

    previous = os.environ.get("RANGEMIX_LOG_DIR")
    with tempfile.TemporaryDirectory() as tmp:
        os.environ["RANGEMIX_LOG_DIR"] = str(Path(tmp) / "logs")
        try:
            grid_path = Path(tmp) / "r.rmg"
            report_path = Path(tmp) / "mix.json"
            assert rangemix.cmd_sample(argparse.Namespace(d=3, N=6, u=1.0, seed=1, stream=0, out=grid_path))
            assert rangemix.cmd_mix(argparse.Namespace(grid=grid_path, method="exact", cap=4000, trials=100,
                                                       seed=0, eps=0.5, radii=[1, 2], out=report_path))
            report = json.loads(report_path.read_text(encoding='utf-8'))
            assert report['method'] == "exact-spectral"
            assert 1 <= report['lower_bound']['t_lower'] <= report['t_mix']
            assert not rangemix.cmd_mix(argparse.Namespace(grid=Path(tmp) / "missing.rmg", method="exact",
                                                           cap=4000, trials=100, seed=0, eps=None,
                                                           radii=[1], out=None))
            statuses = [row['Status'] for row in RunActivityLog().rows()]
            assert statuses == ["Success", "Success", "Error"]

            sidecar = json.loads(grid_path.with_suffix('.json').read_text(encoding='utf-8'))
            assert (sidecar['d'], sidecar['N'], sidecar['seed']) == (3, 6, 1)
            assert sidecar['popcount'] == report['V']

            out_dir = Path(tmp) / "grids"
            assert rangemix.cmd_sample(argparse.Namespace(d=3, N=6, u=1.0, seed=1, stream=0, trials=3,
                                                          out=None, out_dir=out_dir))
            assert len(list(out_dir.glob("*.rmg"))) == 3
            assert len(list(out_dir.glob("*.json"))) == 3
            assert not rangemix.cmd_sample(argparse.Namespace(d=3, N=6, u=1.0, seed=1, stream=0, trials=2,
                                                              out=grid_path, out_dir=None))
        finally:
            if previous is None:
                os.environ.pop("RANGEMIX_LOG_DIR", None)
            else:
                os.environ["RANGEMIX_LOG_DIR"] = previous


def test_cli_mc_reports_lambda2():
    import rangemix

    previous = os.environ.get("RANGEMIX_LOG_DIR")
    with tempfile.TemporaryDirectory() as tmp:
        os.environ["RANGEMIX_LOG_DIR"] = str(Path(tmp) / "logs")
        try:
            grid_path = Path(tmp) / "r.rmg"
            assert rangemix.cmd_sample(argparse.Namespace(d=3, N=6, u=1.0, seed=2, stream=0, out=grid_path))
            reports = {}
            for method in ("exact", "mc"):
                out = Path(tmp) / f"{method}.json"
                assert rangemix.cmd_mix(argparse.Namespace(grid=grid_path, method=method, cap=4000, trials=400,
                                                           seed=0, eps=None, radii=[1], out=out))
                reports[method] = json.loads(out.read_text(encoding='utf-8'))
            assert reports['mc']['method'] == "mc-diagonal"
            assert isinstance(reports['mc']['lambda2'], float)
            assert 0.0 < reports['mc']['lambda2'] < 1.0
            assert abs(reports['mc']['lambda2'] - reports['exact']['lambda2']) < 1e-9
        finally:
            if previous is None:
                os.environ.pop("RANGEMIX_LOG_DIR", None)
            else:
                os.environ["RANGEMIX_LOG_DIR"] = previous


if __name__ == "__main__":
    print("\n" + "="*70)
    print("  EXPERIMENT HARNESS TEST")
    print("="*70 + "\n")
    for name, test in list(globals().items()):
        if name.startswith("test_") and callable(test):
            test()
            print(f"[OK] {name}")
    print("\n" + "="*70)
    print("  TEST COMPLETE - HARNESS WORKING")
    print("="*70 + "\n")
