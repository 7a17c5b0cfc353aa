import numpy as np
import pytest
import torch

from fdcheck import check_module_grad
from synthreal.nets import (AUTOENCODER, EMBEDDER, GENERATOR, INVERSE_GENERATOR, NetworkSpec,
                            StructuralError, WeightSet, autoencode, build_network, embed,
                            generator_forward, init_weights, load_weights, save_weights)
from synthreal.toymm import ImageBatch


# --- by-hand forward pass, plain loops -------------------------------------


def conv(x, w, b, stride=1):
    c_out, c_in, kh, kw = w.shape
    _, h, wd = x.shape
    xp = np.zeros((c_in, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    oh, ow = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += w[o, c, a, bb] * xp[c, i * stride + a, j * stride + bb]
                out[o, i, j] = acc
    return out


def relu(x):
    return np.maximum(x, 0)


def elu(x):
    return np.where(x > 0, x, np.exp(x) - 1)


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


def up2(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def hand_generator(x, p, use_skip=True):
    e0 = relu(conv(x, p["enc0.weight"], p["enc0.bias"]))
    h = relu(conv(e0, p["enc1.weight"], p["enc1.bias"], stride=2))
    r = relu(conv(h, p["blocks.0.conv1.weight"], p["blocks.0.conv1.bias"]))
    h = h + conv(r, p["blocks.0.conv2.weight"], p["blocks.0.conv2.bias"])
    h = relu(conv(up2(h), p["dec1.weight"], p["dec1.bias"]))
    if use_skip:
        h = h + e0
    h = conv(h, p["out.weight"], p["out.bias"])
    if use_skip:
        sx = 1e-3 + (1 - 2e-3) * x
        return sigmoid(h + np.log(sx / (1 - sx)))
    return sigmoid(h)


def hand_autoencoder(x, p):
    h = elu(conv(x, p["enc_in.weight"], p["enc_in.bias"]))
    h = elu(conv(h, p["enc.0.weight"], p["enc.0.bias"], stride=2))
    code = p["to_code.weight"] @ h.reshape(-1) + p["to_code.bias"]
    h = (p["from_code.weight"] @ code + p["from_code.bias"]).reshape(1, 2, 2)
    h = up2(elu(conv(h, p["dec.0.weight"], p["dec.0.bias"])))
    return sigmoid(conv(h, p["dec_out.weight"], p["dec_out.bias"]))


def tiny_spec(kind, **kw):
    base = dict(input_size=4, channels=1, base_channels=1, num_residual_blocks=1, levels=1,
                bottleneck=2, embedding_dim=2)
    base.update(kw)
    return NetworkSpec(kind, **base)


def random_weights(spec, seed):
    net = build_network(spec).double()
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(torch.from_numpy(rng.normal(0, 0.7, tuple(p.shape))))
    return net


def params_of(net):
    return {k: v.detach().numpy() for k, v in net.state_dict().items()}


class TestHandOracles:
    @pytest.mark.parametrize("use_skip", [True, False])
    def test_generator(self, use_skip):
        net = random_weights(tiny_spec(GENERATOR, use_skip=use_skip), 0).eval()
        x = np.random.default_rng(1).random((1, 4, 4))
        got = net(torch.from_numpy(x)[None]).detach().numpy()[0]
        assert np.abs(got - hand_generator(x, params_of(net), use_skip)).max() <= 1e-6

    def test_autoencoder(self):
        net = random_weights(tiny_spec(AUTOENCODER), 2)
        x = np.random.default_rng(3).random((1, 4, 4))
        got = net(torch.from_numpy(x)[None]).detach().numpy()[0]
        assert np.abs(got - hand_autoencoder(x, params_of(net))).max() <= 1e-6

    def test_zero_decoder_reduces_to_skip_path(self):
        net = random_weights(tiny_spec(GENERATOR), 4).eval()
        with torch.no_grad():
            for name, p in net.named_parameters():
                if name.startswith(("blocks", "dec1", "out")):
                    p.zero_()
        x = np.random.default_rng(5).random((1, 4, 4))
        got = net(torch.from_numpy(x)[None]).detach().numpy()[0]
        assert np.abs(got - (1e-3 + (1 - 2e-3) * x)).max() <= 1e-12


class TestShapesAndModes:
    @pytest.mark.parametrize("size", [32, 108])
    def test_generator_preserves_shape(self, size):
        w = init_weights(NetworkSpec(GENERATOR, input_size=size, base_channels=4), 0)
        x = ImageBatch(np.random.default_rng(0).random((2, size, size, 3)), "synthetic", [0, 1])
        y = generator_forward(x, w)
        assert y.pixels.shape == x.pixels.shape
        assert y.pixels.min() >= 0 and y.pixels.max() <= 1

    def test_eval_mode_deterministic(self):
        w = init_weights(NetworkSpec(GENERATOR, input_size=32, base_channels=4), 0)
        x = ImageBatch(np.random.default_rng(0).random((2, 32, 32, 3)), "synthetic", [0, 1])
        assert np.array_equal(generator_forward(x, w, "eval", 1).pixels, generator_forward(x, w, "eval", 2).pixels)

    def test_train_mode_dropout_seeded(self):
        w = init_weights(NetworkSpec(GENERATOR, input_size=32, base_channels=4), 0)
        x = ImageBatch(np.random.default_rng(0).random((2, 32, 32, 3)), "synthetic", [0, 1])
        a = generator_forward(x, w, "train", 1).pixels
        assert np.array_equal(a, generator_forward(x, w, "train", 1).pixels)
        assert not np.array_equal(a, generator_forward(x, w, "train", 2).pixels)
        assert not np.array_equal(a, generator_forward(x, w, "eval").pixels)

    def test_inverse_generator_has_no_dropout(self):
        w = init_weights(NetworkSpec(INVERSE_GENERATOR, input_size=32, base_channels=4), 0)
        x = ImageBatch(np.random.default_rng(0).random((2, 32, 32, 3)), "real", [0, 1])
        assert np.array_equal(generator_forward(x, w, "train", 1).pixels, generator_forward(x, w, "eval").pixels)

    def test_autoencoder_contract(self):
        w = init_weights(NetworkSpec(AUTOENCODER, input_size=32, base_channels=4), 0)
        x = ImageBatch(np.random.default_rng(0).random((3, 32, 32, 3)), "real", [0, 1, 2])
        y = autoencode(x, w)
        assert y.pixels.shape == x.pixels.shape
        assert np.array_equal(y.pixels, autoencode(x, w).pixels)
        assert np.abs(x.pixels - y.pixels).sum() >= 0

    def test_embedding_unit_norm_and_deterministic(self):
        w = init_weights(NetworkSpec(EMBEDDER, input_size=28, base_channels=4), 0)
        x = ImageBatch(np.random.default_rng(0).random((5, 28, 28, 3)), "generated", range(5))
        e = embed(x, w)
        assert e.shape == (5, 32)
        assert np.allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)
        assert np.array_equal(e, embed(x, w))

    def test_structural_errors(self):
        emb = init_weights(NetworkSpec(EMBEDDER, input_size=28, base_channels=4), 0)
        with pytest.raises(StructuralError):
            embed(ImageBatch(np.zeros((1, 32, 32, 3)), "real", [0]), emb)
        ae = init_weights(NetworkSpec(AUTOENCODER, input_size=32, base_channels=4), 0)
        with pytest.raises(StructuralError):
            autoencode(ImageBatch(np.zeros((1, 16, 16, 3)), "real", [0]), ae)
        gen = init_weights(NetworkSpec(GENERATOR, input_size=32, base_channels=4), 0)
        with pytest.raises(StructuralError):
            generator_forward(ImageBatch(np.zeros((1, 32, 32, 1)), "synthetic", [0]), gen)
        with pytest.raises(StructuralError):
            generator_forward(ImageBatch(np.zeros((1, 32, 32, 3)), "synthetic", [0]), emb)


class TestWeightSet:
    def test_roundtrip(self, tmp_path):
        w = init_weights(NetworkSpec(AUTOENCODER, input_size=32, base_channels=4), 3)
        save_weights(w, tmp_path / "d", iteration=7, seed=3)
        assert load_weights(tmp_path / "d").equals(w)

    def test_version_mismatch(self, tmp_path):
        import json

        w = init_weights(NetworkSpec(EMBEDDER, input_size=28, base_channels=4), 3)
        save_weights(w, tmp_path / "e")
        meta = json.loads((tmp_path / "e.json").read_text())
        meta["version"] = "999"
        (tmp_path / "e.json").write_text(json.dumps(meta))
        with pytest.raises(StructuralError):
            load_weights(tmp_path / "e")

    def test_rejects_non_finite(self):
        w = init_weights(NetworkSpec(EMBEDDER, input_size=28, base_channels=4), 3)
        arrays = dict(w.arrays)
        name = next(iter(arrays))
        arrays[name] = arrays[name] * np.nan
        with pytest.raises(ValueError):
            WeightSet(w.spec, arrays)

    def test_spec_mismatch(self):
        w = init_weights(NetworkSpec(EMBEDDER, input_size=28, base_channels=4), 3)
        bigger = NetworkSpec(EMBEDDER, input_size=28, base_channels=8)
        with pytest.raises(StructuralError):
            WeightSet(bigger, w.arrays).to_module()


class TestGradients:
    """Autograd against central differences on instances of at most 200 parameters."""

    TOL = 1e-4

    def _input(self, seed, n=2):
        return torch.from_numpy(np.random.default_rng(seed).random((n, 1, 4, 4)))

    @pytest.mark.parametrize("kind", [GENERATOR, INVERSE_GENERATOR])
    @pytest.mark.parametrize("use_skip", [True, False])
    def test_generators(self, kind, use_skip):
        net = random_weights(tiny_spec(kind, use_skip=use_skip), 10).eval()
        assert sum(p.numel() for p in net.parameters()) <= 200
        x = self._input(11)
        assert check_module_grad(net, lambda m: m(x)) <= self.TOL

    def test_generator_train_mode_fixed_mask(self):
        net = random_weights(tiny_spec(GENERATOR), 12).train()
        x = self._input(13)
        assert check_module_grad(net, lambda m: m(x, generator=torch.Generator().manual_seed(5))) <= self.TOL

    def test_autoencoder(self):
        net = random_weights(tiny_spec(AUTOENCODER), 14)
        assert sum(p.numel() for p in net.parameters()) <= 200
        x = self._input(15)
        assert check_module_grad(net, lambda m: m(x)) <= self.TOL

    def test_embedder(self):
        net = random_weights(tiny_spec(EMBEDDER), 16)
        assert sum(p.numel() for p in net.parameters()) <= 200
        x = self._input(17, n=3)
        weights = torch.from_numpy(np.random.default_rng(18).normal(size=(3, 2)))
        # a weighted sum: the plain sum of unit vectors has a degenerate gradient
        assert check_module_grad(net, lambda m: m(x) * weights) <= self.TOL
