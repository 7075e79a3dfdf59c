import csv

import numpy as np
import pytest

from iris_he.cli import EXIT_CRYPTO, EXIT_INPUT, EXIT_OK, EXIT_SEGMENTATION, main
from iris_he.encoding import save_template
from iris_he.image_pipeline import EyeImage, save_eye_image
from iris_he.store import TemplateStore
from iris_he.synthetic import noisy_sample, random_template, synthetic_eye


def _tree(root, subjects=2, samples=2):
    for s in range(subjects):
        for k in range(samples):
            img, _ = synthetic_eye(10 * s + k, size=(200, 200))
            d = root / f"{s:03d}" / "L"
            d.mkdir(parents=True, exist_ok=True)
            save_eye_image(img, d / f"S{s:03d}L{k:02d}.png")


def test_synth_eval(tmp_path, capsys):
    assert main(["synth", "--store", str(tmp_path / "s"), "--subjects", "5", "--samples", "3", "--seed", "1"]) == EXIT_OK
    assert main(["eval", "--store", str(tmp_path / "s"), "--out", str(tmp_path / "o")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "eer" in out and "comparisons        105" in out
    rows = list(csv.reader(open(tmp_path / "o" / "pairs.csv")))
    assert len(rows) == 106
    assert (tmp_path / "o" / "roc.csv").exists() and (tmp_path / "o" / "summary.csv").exists()


def test_synth_is_byte_identical_per_seed(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--store", str(tmp_path / name), "--subjects", "3", "--samples", "2", "--seed", "4"]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_synth_rate_out_of_range(tmp_path):
    assert main(["synth", "--store", str(tmp_path / "s"), "--rate", "0.5"]) == EXIT_INPUT


def test_single_subject_eval_is_input_error(tmp_path):
    main(["synth", "--store", str(tmp_path / "s"), "--subjects", "1", "--samples", "3"])
    assert main(["eval", "--store", str(tmp_path / "s")]) == EXIT_INPUT


def test_match_clear_self(tmp_path, capsys):
    t = random_template(np.random.default_rng(0), mask_density=0.9)
    save_template(t, tmp_path / "a.tpl")
    assert main(["match", str(tmp_path / "a.tpl"), str(tmp_path / "a.tpl")]) == EXIT_OK
    assert capsys.readouterr().out.startswith("HD 0.0000  D 0  N ")


def test_match_fixture_line(fixtures_dir, capsys):
    args = ["match", str(fixtures_dir / "genuine_a.tpl"), str(fixtures_dir / "genuine_b.tpl"), "--shift-window", "0"]
    assert main(args) == EXIT_OK
    assert capsys.readouterr().out.startswith("HD 0.1627  D 1914  N 11761  shift +0  accept")


def test_match_missing_template(tmp_path):
    assert main(["match", str(tmp_path / "x.tpl"), str(tmp_path / "y.tpl")]) == EXIT_INPUT


def test_keygen_and_fhe_match_agree_with_clear(tmp_path, capsys):
    assert main(["keygen", "--params", "toy", "--seed", "3", "--out", str(tmp_path / "k")]) == EXIT_OK
    rng = np.random.default_rng(1)
    a = random_template(rng, (8, 128), 0.95)
    b = noisy_sample(rng, a, 0.1)
    save_template(a, tmp_path / "a.tpl")
    save_template(b, tmp_path / "b.tpl")
    common = [str(tmp_path / "a.tpl"), str(tmp_path / "b.tpl"), "--shift-window", "2"]
    capsys.readouterr()
    assert main(["match", *common]) == EXIT_OK
    clear = capsys.readouterr().out.split("  time")[0]
    assert main(["match", *common, "--mode", "fhe", "--key", str(tmp_path / "k"), "--out", str(tmp_path / "t.csv")]) == 0
    fhe = capsys.readouterr().out
    assert fhe.split("  time")[0] == clear
    assert "evaluate" in fhe
    assert list(csv.reader(open(tmp_path / "t.csv")))[0] == ["phase", "seconds", "bytes"]


def test_fhe_without_usable_key(tmp_path):
    t = random_template(np.random.default_rng(0), (2, 64))
    save_template(t, tmp_path / "a.tpl")
    (tmp_path / "k").write_bytes(b"garbage")
    args = ["match", str(tmp_path / "a.tpl"), str(tmp_path / "a.tpl"), "--mode", "fhe"]
    assert main(args) == EXIT_INPUT  # no --key
    assert main([*args, "--key", str(tmp_path / "k")]) == EXIT_CRYPTO


def test_bench_command(tmp_path, capsys):
    main(["keygen", "--params", "toy", "--out", str(tmp_path / "k")])
    t = random_template(np.random.default_rng(0), (8, 128))
    save_template(t, tmp_path / "a.tpl")
    args = ["bench", str(tmp_path / "a.tpl"), str(tmp_path / "a.tpl"), "--key", str(tmp_path / "k")]
    assert main([*args, "--shift-window", "1", "--repetitions", "1", "--out", str(tmp_path / "o")]) == EXIT_OK
    assert "overhead_ratio" in capsys.readouterr().out
    assert (tmp_path / "o" / "bench.csv").exists() and (tmp_path / "o" / "timing.csv").exists()


def test_config_file_presets_flags(tmp_path, capsys, fixtures_dir):
    (tmp_path / "c.cfg").write_text("# policy\nthreshold = 0.1\nshift-window=0\n")
    args = ["match", str(fixtures_dir / "genuine_a.tpl"), str(fixtures_dir / "genuine_b.tpl")]
    assert main([*args, "--config", str(tmp_path / "c.cfg")]) == EXIT_OK
    assert "shift +0  reject" in capsys.readouterr().out
    # explicit flags win over the file
    assert main([*args, "--config", str(tmp_path / "c.cfg"), "--threshold", "0.35"]) == EXIT_OK
    assert "accept" in capsys.readouterr().out
    (tmp_path / "bad.cfg").write_text("colour=blue\n")
    assert main([*args, "--config", str(tmp_path / "bad.cfg")]) == EXIT_INPUT


def test_enroll_tree_and_rerun(tmp_path, capsys):
    _tree(tmp_path / "data")
    store = tmp_path / "s"
    assert main(["enroll", str(tmp_path / "data"), "--store", str(store)]) == EXIT_OK
    st = TemplateStore.open(store)
    assert st.ids() == ["000/L/S000L00", "000/L/S000L01", "001/L/S001L00", "001/L/S001L01"]
    before = (store / "index.json").read_bytes()
    assert main(["enroll", str(tmp_path / "data"), "--store", str(store)]) == EXIT_INPUT
    assert "collision" in capsys.readouterr().err
    assert (store / "index.json").read_bytes() == before
    assert st.load("000/L/S000L00").shape == (32, 512)


def test_enroll_reports_segmentation_failures(tmp_path, capsys):
    _tree(tmp_path / "data", subjects=1, samples=1)
    save_eye_image(EyeImage.from_array(np.full((120, 120), 90)), tmp_path / "data" / "000" / "L" / "blank.png")
    assert main(["enroll", str(tmp_path / "data"), "--store", str(tmp_path / "s")]) == EXIT_SEGMENTATION
    assert "1 enrolled, 1 segmentation failures" in capsys.readouterr().out
    assert TemplateStore.open(tmp_path / "s").ids() == ["000/L/S000L00"]


def test_enroll_single_file_with_ids_and_encrypt(tmp_path):
    img, _ = synthetic_eye(5, size=(200, 200))
    save_eye_image(img, tmp_path / "eye.pgm")
    main(["keygen", "--params", "toy", "--out", str(tmp_path / "toy.key")])
    args = ["enroll", str(tmp_path / "eye.pgm"), "--store", str(tmp_path / "s"), "--subject", "u1", "--eye", "R"]
    assert main([*args, "--encrypt", "--key", str(tmp_path / "toy.key")]) == EXIT_OK
    st = TemplateStore.open(tmp_path / "s")
    assert st.ids() == ["u1/R/eye"]
    assert st.ciphertext_path("u1/R/eye", "toy").stat().st_size > 0


def test_enroll_unreadable_image(tmp_path):
    d = tmp_path / "data" / "001" / "L"
    d.mkdir(parents=True)
    (d / "x.png").write_bytes(b"nope")
    assert main(["enroll", str(tmp_path / "data"), "--store", str(tmp_path / "s")]) == EXIT_INPUT


def test_unknown_command():
    assert main(["frobnicate"]) == EXIT_INPUT
