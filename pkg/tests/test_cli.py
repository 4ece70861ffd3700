import os
import subprocess
import sys

import numpy as np
import pytest

from patchgibbs.cli import main, read_manifest
from patchgibbs.degradation import Identity
from patchgibbs.image import make_grids, psnr
from patchgibbs.model_io import load_prior, read_image, save_prior, write_image
from patchgibbs.priors import DictionaryPrior
from patchgibbs.sampler import epll_energy


def smooth_image(seed, n=32):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:n, 0:n] / n
    a, b, c = rng.random(3)
    img = 0.5 + 0.3 * np.sin(2 * np.pi * (a * xx + b * yy) + c) + 0.05 * rng.standard_normal((n, n))
    return np.rint(255 * np.clip(img, 0, 1)) / 255


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    train = root / "train"
    train.mkdir()
    for i in range(2):
        write_image(smooth_image(i), train / f"im{i}.png")
    clean = smooth_image(7)
    write_image(clean, root / "clean.png")
    noisy = clean + 10 / 255 * np.random.default_rng(8).standard_normal(clean.shape)
    write_image(noisy, root / "noisy.png")
    prior = root / "p.prior"
    assert main(["train-prior", str(train), "--k", "2", "--patch-size", "4", "--n-patches", "500",
                 "--iters", "8", "--out", str(prior)]) == 0
    return root


def run(*argv):
    return main([str(a) for a in argv])


def common(work, out, *extra):
    return ["--prior", work / "p.prior", "--iters", 3, "--grids", 4, "--out", out, *extra]


# -- train-prior ------------------------------------------------------------------------


def test_train_prior_outputs(work):
    prior = load_prior(work / "p.prior")
    assert prior.n_components == 2 and prior.patch_size == 4
    m = read_manifest(str(work / "p.prior") + ".manifest")
    trace = [float(v) for v in m["loglik_trace"].split(",")]
    assert len(trace) == 9
    assert all(b >= a - 1e-8 for a, b in zip(trace, trace[1:]))


def test_train_prior_deterministic(work, tmp_path):
    args = ["train-prior", work / "train", "--k", "2", "--patch-size", "4", "--n-patches", "500", "--iters", "8"]
    assert run(*args, "--out", tmp_path / "a.prior") == 0
    assert (tmp_path / "a.prior").read_bytes() == (work / "p.prior").read_bytes()


def test_train_single_component_is_closed_form(work, tmp_path):
    args = ["train-prior", work / "train", "--k", "1", "--patch-size", "4", "--n-patches", "400"]
    assert run(*args, "--iters", 1, "--out", tmp_path / "one.prior") == 0
    assert run(*args, "--iters", 6, "--out", tmp_path / "six.prior") == 0
    a, b = load_prior(tmp_path / "one.prior"), load_prior(tmp_path / "six.prior")
    assert np.allclose(a.means, b.means, atol=1e-12)
    assert np.allclose(a.covariances, b.covariances, atol=1e-12)


def test_train_prior_errors(work, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("train-prior", empty, "--out", tmp_path / "x.prior") == 2
    assert run("train-prior", work / "train", "--k", "50", "--n-patches", "10", "--patch-size", "4",
               "--out", tmp_path / "x.prior") == 2


# -- restoration ------------------------------------------------------------------------


def test_map_tiny_sigma_reproduces_input(work, tmp_path):
    out = tmp_path / "map.png"
    assert run("denoise", work / "clean.png", "--sigma", "0.0001", "--mode", "map", *common(work, out)) == 0
    assert psnr(read_image(out), read_image(work / "clean.png")) > 50


def test_mmse_one_sample_is_sample(work, tmp_path):
    a, b = tmp_path / "a.png", tmp_path / "b.png"
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--mode", "sample", "--seed", 3, *common(work, a)) == 0
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--mode", "mmse", "--samples", 1, "--seed", 3,
               *common(work, b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_manifest_replay_bit_identical(work, tmp_path, capsys):
    out = tmp_path / "d.png"
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--mode", "mmse", "--samples", 3,
               "--ground-truth", work / "clean.png", *common(work, out)) == 0
    m = read_manifest(str(out) + ".manifest")
    assert m["sigma_255"] == "10.0" and float(m["sigma"]) == 10 / 255
    assert float(m["psnr_output"]) > float(m["psnr_input"])
    again = tmp_path / "again.png"
    assert run("replay", str(out) + ".manifest", "--out", again) == 0
    assert "output matches the manifest" in capsys.readouterr().out
    assert again.read_bytes() == out.read_bytes()


def test_workers_do_not_change_output(work, tmp_path):
    a, b = tmp_path / "w1.png", tmp_path / "w3.png"
    assert run("denoise", work / "noisy.png", "--sigma", 10, *common(work, a)) == 0
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--workers", 3, *common(work, b)) == 0
    assert a.read_bytes() == b.read_bytes()


def test_deblur_and_replay(work, tmp_path):
    out = tmp_path / "db.png"
    assert run("deblur", work / "noisy.png", "--kernel-sx", 1.5, "--kernel-sy", 1.0, "--kernel-rho", 0.75,
               "--mode", "map", *common(work, out)) == 0
    m = read_manifest(str(out) + ".manifest")
    assert m["kernel_rho"] == "0.75" and m["sigma_255"] == "2.5"
    again = tmp_path / "db2.png"
    assert run("replay", str(out) + ".manifest", "--out", again) == 0
    assert again.read_bytes() == out.read_bytes()


def test_deblur_kernel_file(work, tmp_path):
    kfile = tmp_path / "k.txt"
    kfile.write_text("0 1 0\n1 4 1\n0 1 0\n")
    out = tmp_path / "kf.png"
    assert run("deblur", work / "noisy.png", "--kernel-file", kfile, *common(work, out)) == 0
    assert "kernel_sha256" in read_manifest(str(out) + ".manifest")


def test_deblur_kernel_required(work, tmp_path):
    assert run("deblur", work / "noisy.png", *common(work, tmp_path / "x.png")) == 2
    assert run("deblur", work / "noisy.png", "--kernel-scale", 1, "--kernel-sx", 1, "--kernel-sy", 1,
               *common(work, tmp_path / "x.png")) == 2


def test_inpaint(work, tmp_path):
    mask = (np.random.default_rng(9).random((32, 32)) > 0.5).astype(float)
    write_image(mask, tmp_path / "mask.png")
    out = tmp_path / "in.png"
    assert run("inpaint", work / "clean.png", "--mask", tmp_path / "mask.png", *common(work, out)) == 0
    m = read_manifest(str(out) + ".manifest")
    assert abs(float(m["observed_fraction"]) - mask.mean()) < 1e-12
    assert run("inpaint", work / "clean.png", "--mask", tmp_path / "nope.png", *common(work, out)) == 2


def test_missing_prior_is_invalid_argument(work, tmp_path):
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--prior", tmp_path / "none.prior",
               "--out", tmp_path / "x.png") == 2


def test_bad_numbers_rejected(work, tmp_path):
    assert run("denoise", work / "noisy.png", "--sigma", 0, *common(work, tmp_path / "x.png")) == 2
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--samples", 0, *common(work, tmp_path / "x.png")) == 2


# -- exit codes --------------------------------------------------------------------------


def test_exit_codes(work, tmp_path):
    bad = tmp_path / "bad.prior"
    bad.write_bytes(b"garbage!" * 4)
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--prior", bad, "--out", tmp_path / "x.png") == 3
    buf = bytearray((work / "p.prior").read_bytes())
    prior = load_prior(work / "p.prior")
    d = prior.dim
    offset = 24 + 8 * (2 + 2 * d)
    buf[offset:offset + 8] = np.float64(-1.0).tobytes()
    nonpd = tmp_path / "nonpd.prior"
    nonpd.write_bytes(bytes(buf))
    assert run("denoise", work / "noisy.png", "--sigma", 10, "--prior", nonpd, "--out", tmp_path / "x.png") == 4
    assert run("denoise", work / "noisy.png", "--sigma", 10, *common(work, tmp_path / "no" / "dir" / "x.png")) == 5
    assert run("psnr", work / "clean.png", tmp_path / "missing.png") == 5


def test_module_entry_point(work):
    r = subprocess.run([sys.executable, "-m", "patchgibbs", "psnr", work / "clean.png", work / "clean.png"],
                       capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout.strip() == "inf"


# -- small commands ----------------------------------------------------------------------


def test_energy_matches_library(work, capsys):
    assert run("energy", work / "noisy.png", work / "noisy.png", "--prior", work / "p.prior", "--sigma", 10,
               "--grids", 3) == 0
    printed = float(capsys.readouterr().out)
    x = read_image(work / "noisy.png")
    prior = load_prior(work / "p.prior")
    expect = epll_energy(x, x, Identity(), (10 / 255) ** 2, make_grids(4, 3), prior)
    assert printed == pytest.approx(expect, rel=1e-9)


def test_psnr_command(work, capsys):
    assert run("psnr", work / "clean.png", work / "noisy.png") == 0
    val = float(capsys.readouterr().out)
    assert val == pytest.approx(psnr(read_image(work / "clean.png"), read_image(work / "noisy.png")), abs=1e-6)


def test_sample_prior_dictionary_gives_atoms(tmp_path):
    atoms = np.rint(np.random.default_rng(10).random((3, 16)) * 255) / 255
    save_prior(DictionaryPrior(atoms, 4), tmp_path / "d.prior")
    assert run("sample-prior", "--prior", tmp_path / "d.prior", "--count", 12, "--out", tmp_path / "s") == 0
    files = sorted(os.listdir(tmp_path / "s"))
    assert len(files) == 12
    for f in files:
        v = read_image(tmp_path / "s" / f).ravel()
        assert np.min(np.abs(atoms - v).max(axis=1)) == 0


def test_sample_prior_deterministic(work, tmp_path):
    for name in ("a", "b"):
        assert run("sample-prior", "--prior", work / "p.prior", "--count", 4, "--seed", 5,
                   "--out", tmp_path / name) == 0
    for f in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
