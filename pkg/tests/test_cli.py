"""
Testy pre caustica CLI (render, compare, viz, test-dist)
"""

import io
import json
import os
import sys
import tempfile
from contextlib import redirect_stderr, redirect_stdout

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'backend'))

from main import main  # type: ignore
from services.export_service import read_metrics_csv  # type: ignore
from services.image_io import read_pfm, write_pfm  # type: ignore

SCENE = os.path.join(os.path.dirname(__file__), '..', 'scenes', 'minimal.json')
SMALL = ["--scene", SCENE, "--iterations", "3", "--photons", "1500", "--init-photons", "1500", "--components", "4"]


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with redirect_stdout(out), redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def test_render_writes_outputs():
    with tempfile.TemporaryDirectory() as tmp:
        code, out, _ = cli("render", *SMALL, "--guider", "g3d", "--seed", "1", "--output-dir", tmp)
        assert code == 0
        for name in ("minimal_g3d.pfm", "minimal_g3d.ppm", "minimal_g3d_combined.pfm", "minimal_g3d_radius.ppm",
                     "minimal_g3d_metrics.csv", "minimal_g3d_summary.json"):
            assert os.path.exists(os.path.join(tmp, name)), f"{name} missing"
        assert read_pfm(os.path.join(tmp, "minimal_g3d.pfm")).shape == (18, 24, 3)
        df = read_metrics_csv(os.path.join(tmp, "minimal_g3d_metrics.csv"))
        assert df["iteration"].tolist() == [0, 1, 2]
        assert df["mse"].isna().all(), "No reference means no MSE"
        summary = json.load(open(os.path.join(tmp, "minimal_g3d_summary.json"), encoding="utf-8"))
        assert summary["guider"]["kind"] == "g3d" and summary["config"]["iterations"] == 3
        assert summary["light_pmf"] == [1.0]


def test_render_is_byte_identical():
    with tempfile.TemporaryDirectory() as tmp:
        a, b = os.path.join(tmp, "a"), os.path.join(tmp, "b")
        assert cli("render", *SMALL, "--seed", "4", "--output-dir", a)[0] == 0
        assert cli("render", *SMALL, "--seed", "4", "--output-dir", b)[0] == 0
        pa = open(os.path.join(a, "minimal_g3d.pfm"), "rb").read()
        pb = open(os.path.join(b, "minimal_g3d.pfm"), "rb").read()
        assert pa == pb, "Same seed must give the same image bytes"


def test_render_with_reference():
    with tempfile.TemporaryDirectory() as tmp:
        ref = os.path.join(tmp, "ref.pfm")
        write_pfm(ref, np.zeros((18, 24, 3)))
        code, _, _ = cli("render", *SMALL, "--guider", "uniform", "--seed", "1", "--output-dir", tmp, "--reference", ref)
        assert code == 0
        df = read_metrics_csv(os.path.join(tmp, "minimal_uniform_metrics.csv"))
        assert not df["mse"][1:].isna().any()

        write_pfm(ref, np.zeros((4, 4, 3)))
        code, _, err = cli("render", *SMALL, "--seed", "1", "--output-dir", tmp, "--reference", ref)
        assert code == 2 and "IMAGE_ERROR" in err


def test_compare():
    with tempfile.TemporaryDirectory() as tmp:
        code, out, _ = cli("compare", *SMALL, "--seed", "2", "--guiders", "uniform,g3d",
                           "--reference-iterations", "3", "--output-dir", tmp)
        assert code == 0
        assert os.path.exists(os.path.join(tmp, "minimal_reference.pfm"))
        assert os.path.exists(os.path.join(tmp, "minimal_uniform_metrics.csv"))
        assert os.path.exists(os.path.join(tmp, "minimal_g3d_metrics.csv"))
        lines = out.strip().splitlines()
        assert lines[0].split() == ["guider", "mse", "1-ssim", "gathered"]
        assert sorted(line.split()[0] for line in lines[1:3]) == ["g3d", "uniform"]


def test_viz():
    with tempfile.TemporaryDirectory() as tmp:
        code, out, _ = cli("viz", *SMALL, "--seed", "1", "--output-dir", tmp)
        assert code == 0
        assert os.path.exists(os.path.join(tmp, "minimal_radius.ppm"))
        if "light 0" in out:
            assert os.path.exists(os.path.join(tmp, "minimal_light0_directional.ppm"))
            assert os.path.exists(os.path.join(tmp, "minimal_light0_spatial.ppm"))


def test_test_dist():
    code, out, _ = cli("test-dist", "--samples", "50000", "--seed", "1")
    assert code in (0, 1)
    assert "closed form vs radial quadrature" in out
    assert "📊 Results:" in out


def test_errors_exit_with_code_two():
    code, _, err = cli("render", "--scene", "does/not/exist.json", "--iterations", "2")
    assert code == 2 and "SCENE_PARSE_ERROR" in err
    code, _, err = cli("render", *SMALL, "--beta", "2.0")
    assert code == 2 and "CONFIG_ERROR" in err
    try:
        cli("render", *SMALL, "--guider", "path")
        assert False, "Unknown guider should be rejected by argparse"
    except SystemExit as e:
        assert e.code == 2


if __name__ == "__main__":
    print("🧪 Testing CLI...")
    print()

    tests = [
        ("render outputs", test_render_writes_outputs),
        ("render determinism", test_render_is_byte_identical),
        ("render with reference", test_render_with_reference),
        ("compare", test_compare),
        ("viz", test_viz),
        ("test-dist", test_test_dist),
        ("Error exit codes", test_errors_exit_with_code_two),
    ]

    passed = 0
    failed = 0

    for name, test_func in tests:
        try:
            test_func()
            print(f"✅ {name}")
            passed += 1
        except Exception as e:
            print(f"❌ {name}: {e}")
            failed += 1

    print()
    print("═══════════════════════════════════════")
    print(f"📊 Results: {passed} passed, {failed} failed")
    print("═══════════════════════════════════════")

    if failed > 0:
        sys.exit(1)
