import numpy as np
import pytest
import torch

torch.set_num_threads(2)

from refvae import data as D
from refvae.networks import ArchConfig, build_model
from refvae.training import TrainConfig, train


@pytest.fixture(scope="session")
def toy16():
    """Small shared toy corpus (60 reference / 120 unlabelled, 16x16)."""
    return D.make_toy_dataset(60, 16, np.random.default_rng(11))


@pytest.fixture(scope="session")
def arch16():
    return ArchConfig(image_size=16, base_channels=8, num_blocks=2, d_z=4, d_e=4)


@pytest.fixture()
def model16(arch16):
    return build_model(arch16, "srbvae", seed=5)


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """Desk-scale rbvae run on the toy corpus (acceptance criterion 7 regime)."""
    out = tmp_path_factory.mktemp("toyrun")
    ds = D.make_toy_dataset(600, 16, np.random.default_rng(5))
    arch = ArchConfig(image_size=16, base_channels=8, num_blocks=2, d_z=8, d_e=8)
    cfg = TrainConfig(variant="rbvae", epochs=3, batch_m=36,
                      learning_rate=5e-4, seed=1)
    payload = train(ds, arch, cfg, out_dir=out)
    return ds, arch, cfg, payload, out


@pytest.fixture(scope="session")
def srb_run():
    """Desk-scale srbvae run on the colored-digit pipeline (acceptance
    criterion 6 regime): 4k unlabelled / 2k reference at 32x32."""
    import time

    t0 = time.time()
    rng = np.random.default_rng(42)
    raw = D.synthetic_digits(4000, rng)
    ds = D.build_splits(raw, rng, image_size=32)
    arch = ArchConfig(image_size=32, base_channels=16, num_blocks=3,
                      d_z=32, d_e=32)
    cfg = TrainConfig(
        variant="srbvae", epochs=5, batch_m=36, learning_rate=3e-4, seed=7,
        recon_image_u=0.1, recon_image_r=0.1,
        recon_latent_u=1.0, recon_latent_r=1.0,
    )
    payload = train(ds, arch, cfg)
    return ds, arch, cfg, payload, time.time() - t0


def image_batch(images01: np.ndarray) -> torch.Tensor:
    return (
        torch.from_numpy(D.to_model_range(images01)).permute(0, 3, 1, 2).contiguous()
    )
