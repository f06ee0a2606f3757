"""Smoke test for the tipsynth_py extension.

Build first with `cargo build -p tipsynth-py` (or --release); the script
picks up the shared library from target/ and imports it.
"""

import json
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module(tmp: Path):
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libtipsynth_py.so"
        if lib.exists():
            shutil.copy(lib, tmp / "tipsynth_py.so")
            sys.path.insert(0, str(tmp))
            import tipsynth_py

            return tipsynth_py
    sys.exit("libtipsynth_py.so not found; run `cargo build -p tipsynth-py` first")


def main() -> None:
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        ts = load_module(tmp)
        print("tipsynth_py", ts.__version__)

        corpus = tmp / "corpus"
        n = ts.generate_corpus(str(corpus), seed=5, pieces=5)
        assert n == 5, n
        manifest = json.loads((corpus / "manifest.json").read_text())
        piece = manifest["pieces"][0]

        gt = ts.read_trajectory(str(corpus / piece["trajectories"][1]))
        assert gt["hand"] == "R" and gt["stage"] == "GT" and gt["joints"] == 21
        assert len(gt["data"]) == gt["frames"] * 21 * 3

        models = tmp / "models"
        measured = ts.build_priors(str(corpus), str(models))
        assert measured > 0

        cfg = tmp / "cfg.json"
        cfg.write_text(json.dumps({"model_dir": str(models)}))
        out = tmp / "run"
        metrics = ts.synthesize(
            str(corpus / piece["midi"]),
            str(corpus / piece["fingering"]),
            config_path=str(cfg),
            through_stage="1",
            out_dir=str(out),
        )
        recall = metrics["contact"]["recall"]
        print(f"stage 1 recall {recall:.3f}, precision {metrics['contact']['precision']:.3f}")
        assert recall > 0.9
        s1 = ts.read_trajectory(str(out / "S1.L.tptj"))
        assert s1["stage"] == "S1" and s1["joints"] == 5

        try:
            ts.synthesize(str(corpus / piece["midi"]), str(corpus / piece["fingering"]), config_path=str(cfg))
        except ValueError as e:
            assert "missing model files" in str(e), e
        else:
            raise AssertionError("full run without models should fail")

        checks = ts.gradient_suite(seed=1, coords=3)
        failed = [c["block"] for c in checks if c["max_rel_err"] >= c["tolerance"]]
        print(f"{len(checks)} gradient checks, failing: {failed}")
        assert not failed

    print("smoke test passed")


if __name__ == "__main__":
    main()
