import pytest

from agingtree import backends
from agingtree.backends import BackendProbeError, create_backend, describe, generation, probe
from agingtree.toybackend import ToyBackend, ToyModelSpec


@pytest.fixture(autouse=True)
def clean_registry():
    yield
    backends.unregister_backend("mini")
    backends.unregister_backend("broken")


def test_probe_nothing_configured_is_empty():
    assert probe(None, env={}) is None


def test_probe_toy_descriptor():
    descriptor = probe("toy", env={})
    assert descriptor.name == "toy"
    assert descriptor.latent_shape == (16, 16)
    assert len(descriptor.attention_sites) == 2


def test_toy_registered_as_external():
    backends.register_backend("mini", lambda seed: ToyBackend(ToyModelSpec(layers=1, seed=seed)))
    descriptor = probe("external:mini", env={})
    assert len(descriptor.attention_sites) == 1


def test_broken_backend_diagnostic_names_missing_piece():
    def exploding(seed):
        raise ImportError("no module named megamodel")

    backends.register_backend("broken", exploding)
    with pytest.raises(BackendProbeError, match="external:broken.*megamodel"):
        probe("external:broken", env={})


def test_unregistered_external_diagnostic():
    with pytest.raises(BackendProbeError, match="ghost"):
        create_backend("external:ghost", env={})


def test_env_override_wins():
    backends.register_backend("mini", lambda seed: ToyBackend(ToyModelSpec(layers=1, seed=seed)))
    backend = create_backend("toy", env={"AMK_BACKEND": "external:mini"})
    assert backend.spec.layers == 1


def test_duplicate_registration_rejected():
    backends.register_backend("mini", lambda seed: ToyBackend(ToyModelSpec(seed=seed)))
    with pytest.raises(ValueError):
        backends.register_backend("mini", lambda seed: ToyBackend(ToyModelSpec(seed=seed)))


def test_generation_gate_serializes(toy_backend):
    with generation(toy_backend):
        assert toy_backend.gate.locked()
    assert not toy_backend.gate.locked()


def test_describe_flags(toy_backend):
    descriptor = describe(toy_backend)
    assert descriptor.supports_hooks and descriptor.supports_text_mask


def test_roundtrip_psnr_reported(toy_backend, toy_image):
    psnr = backends.roundtrip_psnr(toy_backend, toy_image)
    print(f"toy backend round-trip PSNR: {psnr} dB")
    assert psnr == float("inf")  # toy codec is exact; real backends just report
