import numpy as np
import pytest

from fedmerdel.errors import ContractError
from fedmerdel.experiment import RunUnit, run_experiment, run_unit, validate_manifest

MANIFEST = {"name": "tiny", "generator": {"n": 200, "p": 10, "k_true": 3, "n_noise_vars": 2}, "datasets": 2,
            "seeds": 2, "model": {"k_init": 6, "laps": 2, "varsel": True}, "methods": ["full", "fedmerdel"],
            "federation": {"batches": 2}}


@pytest.mark.parametrize("bad", [{}, {"datasets": 2}, {"generator": {}, "methods": ["magic"]},
                                 {"generator": {}, "model": {"colour": 1}},
                                 {"generator": {}, "methods": ["fedmerdel"], "federation": {"search": "x"}},
                                 {"generator": {}, "seeds": 0}])
def test_manifest_validation(bad):
    with pytest.raises(ContractError):
        validate_manifest(bad)


def test_run_unit_records():
    rec, seconds = run_unit(MANIFEST, RunUnit(1, 0, "fedmerdel"))
    assert rec["method"] == "fedmerdel" and seconds >= 0
    assert {"ari", "clusters", "elbo", "merges", "f1", "relevant_found"} <= set(rec)
    rec, _ = run_unit(MANIFEST, RunUnit(1, 0, "full"))
    assert -1 <= rec["ari"] <= 1 and rec["n_relevant"] == 8


def test_experiment_report_shape_and_determinism():
    report, timing = run_experiment(MANIFEST)
    again, _ = run_experiment(MANIFEST)
    assert report == again
    assert len(report["records"]) == 8
    assert set(report["summary"]) == {"full", "fedmerdel"}
    aris = [r["ari"] for r in report["records"] if r["method"] == "full"]
    assert report["summary"]["full"]["ari"]["median"] == pytest.approx(np.median(aris))
    assert len(timing["seconds"]) == 8 and "seconds" not in str(report)


def test_parallel_jobs_match_serial():
    small = dict(MANIFEST, seeds=1, methods=["full"])
    assert run_experiment(small, jobs=2)[0] == run_experiment(small)[0]
