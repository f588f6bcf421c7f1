import numpy as np
import pytest

from diffmask.tensor import make_rng


@pytest.fixture
def rng():
    return make_rng(20240611)


def rand_complex(rng, *shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def rel_err(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def central_diff(f, x, d, h=1e-6):
    """Directional derivative of scalar f at x along d (both possibly complex arrays)."""
    return (f(x + h * d) - f(x - h * d)) / (2 * h)


# the desk-scale denoiser used by the slow CLI and acceptance tests
DESK_NET = {"n_images": 500, "data_seed": 123, "epochs": 20, "lr": 2e-3, "batch_size": 16, "seed": 0}


def _desk_net_key():
    import hashlib
    import json

    import diffmask.denoiser as mod

    src = open(mod.__file__, "rb").read()
    return hashlib.sha256(src + json.dumps(DESK_NET, sort_keys=True).encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_net_path(request):
    """Checkpoint of the desk denoiser, trained once and cached by source hash and settings."""
    from diffmask.denoiser import conv_image_preset, train_denoiser
    from diffmask.phantoms import random_phantoms
    from diffmask.scores import SigmaSampler

    path = request.config.cache.mkdir("diffmask") / f"desk-net-{_desk_net_key()}.dmnet"
    if not path.is_file():
        c = DESK_NET
        images = random_phantoms(c["n_images"], seed=c["data_seed"])
        net = train_denoiser(
            images,
            SigmaSampler(),
            c["epochs"],
            c["lr"],
            make_rng(c["seed"]),
            config=conv_image_preset(images[0].shape),
            batch_size=c["batch_size"],
        )
        net.save(path)
    return path


@pytest.fixture(scope="session")
def desk_net(desk_net_path):
    from diffmask.denoiser import DenoiserNet

    return DenoiserNet.load(desk_net_path)


# acceptance verdicts, echoed in the terminal summary so they survive output capture
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
