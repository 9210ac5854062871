import numpy as np
import pytest

from auxtask import tensor as T
from auxtask.models import AuxTask, EncoderConfig, build_network, classify, forward, parameter_count
from auxtask.tensor import DimensionError


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).standard_normal((4, 3, 32, 32)).astype(np.float32)


def decoder_params(net):
    return [p for name, p in net.named_parameters() if name.startswith("decoder.")]


@pytest.mark.parametrize("backbone", ["plain-cnn", "micro-resnet"])
@pytest.mark.parametrize("aux,channels", [(AuxTask.NONE, None), (AuxTask.RECON, 3), (AuxTask.FT, 2)])
def test_output_shapes(backbone, aux, channels, batch):
    net = build_network(EncoderConfig(backbone, width=8), aux)
    feats = net.encoder(T.Tensor(batch))
    assert feats.shape == (4, 32, 4, 4)
    logits, aux_out = forward(net, batch)
    assert logits.shape == (4, 10)
    if channels is None:
        assert aux_out is None
        assert net.decoder is None and decoder_params(net) == []
    else:
        assert aux_out.shape == (4, channels, 32, 32)
        assert net.decoder.layers[-1].weight.shape[1] == channels


def test_encoder_runs_once_per_forward(batch):
    net = build_network(EncoderConfig("plain-cnn", width=8), AuxTask.FT)
    forward(net, batch)
    assert net.encoder_calls == 1
    classify(net, batch)
    assert net.encoder_calls == 2


def test_initialization_is_deterministic():
    a = build_network(EncoderConfig("micro-resnet", 8, seed=3), AuxTask.FT)
    b = build_network(EncoderConfig("micro-resnet", 8, seed=3), AuxTask.FT)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = build_network(EncoderConfig("micro-resnet", 8, seed=4), AuxTask.FT)
    assert not np.array_equal(a.encoder.stem.conv.weight.data, c.encoder.stem.conv.weight.data)


def test_aux_choice_does_not_change_shared_init():
    none = build_network(EncoderConfig("plain-cnn", 8, seed=1), AuxTask.NONE)
    ft = build_network(EncoderConfig("plain-cnn", 8, seed=1), AuxTask.FT)
    shared = dict(none.named_parameters())
    for name, p in ft.named_parameters():
        if name in shared:
            np.testing.assert_array_equal(p.data, shared[name].data)
    assert parameter_count(ft) > parameter_count(none)


def test_parameter_count_is_deterministic():
    counts = {parameter_count(build_network(EncoderConfig("plain-cnn", 8), AuxTask.RECON)) for _ in range(2)}
    assert len(counts) == 1


def test_classification_loss_leaves_decoder_untouched(batch):
    net = build_network(EncoderConfig("plain-cnn", 8), AuxTask.RECON)
    logits, aux_out = forward(net, batch)
    T.backward(T.softmax_cross_entropy(logits, [0, 1, 2, 3]))
    assert all(p.grad is None for p in decoder_params(net))
    assert net.head.weight.grad is not None


def test_wrong_input_shape():
    net = build_network(EncoderConfig("plain-cnn", 8), AuxTask.NONE)
    with pytest.raises(DimensionError):
        forward(net, np.zeros((2, 1, 32, 32), np.float32))


def test_unknown_backbone():
    with pytest.raises(ValueError):
        EncoderConfig("vgg")


def test_state_dict_round_trip_and_mismatch():
    net = build_network(EncoderConfig("plain-cnn", 8), AuxTask.FT)
    state = net.copy_state()
    for p in net.parameters():
        p.data += 1
    net.load_state_dict(state)
    for name, arr in net.state_dict().items():
        np.testing.assert_array_equal(arr, state[name])
    other = build_network(EncoderConfig("plain-cnn", 16), AuxTask.FT)
    with pytest.raises(ValueError, match="encoder.stages.0.conv.weight"):
        other.load_state_dict(state)


def test_decoder_last_layer_can_go_negative(batch):
    net = build_network(EncoderConfig("plain-cnn", 8), AuxTask.RECON)
    _, aux_out = forward(net, batch)
    assert aux_out.data.min() < 0
