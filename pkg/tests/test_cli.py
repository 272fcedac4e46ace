import subprocess
import sys

import pytest

from yolocs import tensor as T
from yolocs.cli import main, resolve_config

from conftest import CONFIGS, ROOT


def run(capsys, *argv):
    code = main(["--config-dir", str(CONFIGS), *argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_summary_baseline(capsys):
    code, out, _ = run(capsys, "summary", "configs/v5l-baseline", "--img-size", "640")
    assert code == 0
    assert out.splitlines()[-1] == "total: 46,593,725 params (46.59M), 109.4 GFLOPs"


def test_summary_kv_and_nc(capsys):
    code, out, _ = run(capsys, "summary", "yolocs-s", "--format", "kv", "--nc", "2")
    assert code == 0
    last = dict(kv.split("=") for kv in out.splitlines()[-1].split()[1:])
    assert last["img_size"] == "640" and float(last["params_m"]) > 0
    assert "out=1x21x80x80" in out


def test_config_resolution(tmp_path):
    assert resolve_config("v5l-baseline", str(CONFIGS)).name == "v5l-baseline.yaml"
    assert resolve_config(str(CONFIGS / "v5l-dh"), "/nonexistent").name == "v5l-dh.yaml"
    assert resolve_config(str(CONFIGS / "v5l-dh.yaml"), "/nonexistent").name == "v5l-dh.yaml"


def test_missing_config_exit_2(capsys):
    code, _, err = run(capsys, "summary", "configs/does-not-exist")
    assert code == 2 and "configs/does-not-exist" in err


def test_bad_config_exit_2(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nc: 2\nbackbone:\n  [-1, 1, Nope, [8]]\n")
    code, _, err = run(capsys, "summary", str(bad))
    assert code == 2 and "line 3" in err


def test_bad_img_size_exit_2(capsys):
    code, _, err = run(capsys, "summary", "micro", "--img-size", "100")
    assert code == 2 and "32" in err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["verify", "--suite", "bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_compare(capsys):
    code, out, _ = run(capsys, "compare", "v5l-baseline", "v5l-baseline", "--format", "kv")
    assert code == 0
    assert out.splitlines()[1].endswith("d_params=0 d_params_m=+0.00 d_gflops=+0.0")
    code, out, _ = run(capsys, "compare", "v5l-baseline", "dcfs-1x1")
    assert code == 0 and "(-" in out.splitlines()[2]


def test_verify_passes(capsys):
    code, out, _ = run(capsys, "verify", "--suite", "kernels")
    assert code == 0 and "5/5 checks passed" in out
    code, out, _ = run(capsys, "verify", "--suite", "receptive-field", "--format", "kv")
    assert code == 0 and "status=FAIL" not in out


def test_verify_mutation_fails_naming_op(capsys, monkeypatch):
    real = T.conv2d_backward

    def broken(*args, **kwargs):
        gi, gw, gb = real(*args, **kwargs)
        return gi, gw, None if gb is None else -gb

    monkeypatch.setattr(T, "conv2d_backward", broken)
    code, out, _ = run(capsys, "verify", "--suite", "gradients")
    assert code == 1
    failing = out.splitlines()[-1]
    assert "failing" in failing and "conv2d k1 s1 bias" in failing


def test_forward_deterministic_and_seed_sensitive(capsys):
    _, a, _ = run(capsys, "forward", "micro", "--img-size", "64", "--seed", "3")
    _, b, _ = run(capsys, "forward", "micro", "--img-size", "64", "--seed", "3")
    _, c, _ = run(capsys, "forward", "micro", "--img-size", "64", "--seed", "4")
    assert a == b and a != c
    assert "shape (1, 21, 8, 8)" in a


def test_forward_checksum_tracks_weights():
    import numpy as np

    from yolocs.cli import checksum
    from yolocs.graph import build, load_config

    g = build(load_config(CONFIGS / "micro.yaml"), img_size=64, seed=0).eval()
    x = np.random.default_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32)
    before = [checksum(o) for o in g.forward(x)]
    g.nodes[5].module.conv.weight[0, 0, 0, 0] += 1e-3
    after = [checksum(o) for o in g.forward(x)]
    assert before != after


def test_forward_yolocs_l_640(capsys):
    code, out, _ = run(capsys, "forward", "yolocs-l", "--img-size", "640")
    assert code == 0
    shapes = [line.split("shape ")[1].split(")")[0] + ")" for line in out.splitlines()]
    assert shapes == ["(1, 255, 80, 80)", "(1, 255, 40, 40)", "(1, 255, 20, 20)"]


def test_toy_train_cli(capsys):
    code, out, _ = run(capsys, "toy-train", "micro", "--steps", "2", "--seed", "0", "--format", "kv")
    assert code == 0
    assert [line.split()[0] for line in out.splitlines()[:3]] == ["step=0", "step=1", "step=2"]
    code, out, _ = run(capsys, "toy-train", "micro", "--steps", "-1")
    assert code == 2


def test_toy_train_divergence_exit_1(capsys):
    code, out, _ = run(capsys, "toy-train", "micro", "--steps", "10", "--lr", "1e6")
    assert code == 1 and "diverged" in out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "yolocs", "summary", "v5l-baseline", "--format", "kv"],
                          cwd=ROOT, capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert "params_m=46.59" in proc.stdout.splitlines()[-1]


def test_numpy_fallback_gives_identical_output():
    import os

    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, YOLOCS_DISABLE_NUMBA=flag)
        proc = subprocess.run([sys.executable, "-c",
                               "import sys; from yolocs import _backend; from yolocs.cli import main; "
                               "print(_backend.backend_name()); "
                               "sys.exit(main(['forward', 'micro', '--img-size', '64', '--batch', '2']))"],
                              cwd=ROOT, env=env, capture_output=True, text=True, check=False)
        assert proc.returncode == 0, proc.stderr
        outs.append(proc.stdout.splitlines())
    assert outs[0][0] == "numba" and outs[1][0] == "numpy"
    assert outs[0][1:] == outs[1][1:]
