import importlib.util
from pathlib import Path

from cdimf.cli import main
from cdimf.dataio import write_log
from cdimf.synthetic import make_pair

ROOT = Path(__file__).resolve().parents[1]


def load_script():
    spec = importlib.util.spec_from_file_location("reproduce", ROOT / "scripts" / "reproduce.py")
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def test_pipeline_runs_on_small_layout(tmp_path, monkeypatch):
    pair = make_pair(n_users=120, n_items=150, rank=4, interactions=(4, 9), seed=2,
                     names=("sport", "cloth"))
    for log in pair.logs:
        write_log(log, tmp_path / f"{log.domain_name}.tsv")
    inputs = ["--input", str(tmp_path / "sport.tsv"), "--input", str(tmp_path / "cloth.tsv"),
              "--names", "sport", "cloth", "--no-filter"]
    assert main(["prepare", *inputs, "--out", str(tmp_path / "data" / "warm")]) == 0
    assert main(["prepare", *inputs, "--scenario", "cold", "--test-fraction", "0.1",
                 "--out", str(tmp_path / "data" / "cold")]) == 0
    for dom in ("sport", "cloth"):  # cold layout ships without validation files
        (tmp_path / "data" / "cold" / dom / "valid.tsv").unlink()

    mod = load_script()
    monkeypatch.setattr(mod, "SEARCH", [("consensus.rho", [1.0])])
    monkeypatch.setattr(mod, "START", {"solver": {"d": 4, "lam": 1.0},
                                       "consensus": {"rho": 3.0, "outer_rounds": 2},
                                       "eval": {"k": 10, "n_negatives": 99, "seed": 0}})
    results = mod.reproduce(tmp_path / "data", tmp_path / "out")
    assert set(results) == {"warm/cdimf", "warm/als-joined", "cold/cdimf"}
    for r in results.values():
        assert set(r["hr"]) == {"sport", "cloth"}
        assert all(0 <= v <= 100 for v in r["hr"].values())
    assert (tmp_path / "out" / "reproduction.json").exists()
    assert (tmp_path / "out" / "splits" / "cold" / "sport" / "valid.tsv").exists()
