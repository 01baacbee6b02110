"""Smoke test for the `naf` extension module.

Build and install first:

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import numpy as np

import naf


def tiny_config() -> naf.Config:
    text = naf.Config.desk().to_toml()
    cfg = naf.Config.from_toml(text)
    cfg.num_views = 12
    cfg.iterations = 20
    cfg.noise = 0.0
    return cfg


def main() -> None:
    cfg = tiny_config()
    truth, clean, noisy = naf.simulate(cfg)
    assert truth.dims == [64, 64, 64]
    assert clean.array().shape == (12, 128, 128)
    # zero noise: the noisy scan is the clean scan
    assert np.array_equal(clean.array(), noisy.array())

    arr = truth.array()
    assert arr.dtype == np.float32 and arr.min() >= 0.0 and arr.max() <= 1.0

    assert naf.psnr(truth, truth) == 99.0
    assert naf.ssim(truth, truth) == 1.0
    lo, hi = truth.extent
    shifted = naf.Volume(np.clip(arr + 0.1, 0, 2).astype(np.float32), list(lo), list(hi))
    assert math.isclose(naf.psnr(truth, shifted), 20.0, abs_tol=0.01)

    fdk, field = naf.reconstruct("fdk", noisy, cfg, truth)
    assert field is None
    p_fdk, s_fdk = naf.evaluate(fdk, truth)
    print(f"fdk  PSNR={p_fdk:.2f}dB SSIM={s_fdk:.4f}")

    vol, field = naf.reconstruct("naf", noisy, cfg)
    assert field is not None and field.iteration == cfg.iterations
    mu = field.query(np.zeros((4, 3), dtype=np.float32))
    assert mu.shape == (4,) and np.all((mu > 0) & (mu < 1))
    again = field.extract(vol.dims)
    assert np.array_equal(again.array(), vol.array())

    with tempfile.TemporaryDirectory() as d:
        vol.save(str(Path(d) / "recon.raw"))
        back = naf.Volume.load(str(Path(d) / "recon.raw"))
        assert np.array_equal(back.array(), vol.array())
        field.save(str(Path(d) / "field.bin"))
        assert naf.Field.load(str(Path(d) / "field.bin")).num_params == field.num_params

    try:
        naf.reconstruct("asd-pocs", noisy, cfg)
    except ValueError as e:
        assert "unknown method" in str(e)
    else:
        raise AssertionError("unknown method accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
