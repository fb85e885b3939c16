import pytest
import torch

from spgcde.errors import BadConfig, ShapeMismatch
from spgcde.flow_decoder import (
    FlowBlock,
    FlowDecoder,
    FlowSpec,
    OutputHead,
    decoder_channels,
    to_probabilities,
)


def test_flow_spec():
    assert FlowSpec.for_width(1).pairs == ((1024, 2), (512, 4), (256, 8), (128, 16))
    assert FlowSpec.for_width(16).pairs == ((64, 2), (32, 4), (16, 8), (8, 16))
    with pytest.raises(BadConfig):
        FlowSpec(((64, 2), (32, 3), (16, 8), (8, 16))).validate()
    with pytest.raises(BadConfig):
        FlowSpec(((16, 2), (32, 4), (16, 8), (8, 16))).validate()


def test_flow_block_shapes():
    with torch.no_grad():
        assert FlowBlock(32, 64, 2).eval()(torch.randn(1, 32, 2, 2)).shape == (1, 64, 4, 4)
        assert FlowBlock(512, 128, 16).eval()(torch.randn(1, 512, 7, 7)).shape == (1, 128, 112, 112)
    with pytest.raises(BadConfig):
        FlowBlock(32, 64, 3)


def _skips(channels, size, batch=1):
    strides = (2, 4, 8, 16, 32)
    return [torch.randn(batch, c, size // s, size // s) for c, s in zip(channels, strides)]


def test_decode_shapes_w16():
    dec = FlowDecoder(32, [8, 16, 32, 64, 128], decoder_channels(16), FlowSpec.for_width(16)).eval()
    with torch.no_grad():
        levels = dec(torch.randn(1, 32, 2, 2), _skips([8, 16, 32, 64, 128], 64))
    assert [tuple(l.shape[1:]) for l in levels] == [(64, 2, 2), (32, 4, 4), (16, 8, 8), (8, 16, 16), (4, 32, 32)]


def test_decode_shapes_w1():
    dec = FlowDecoder(512, [128, 256, 512, 1024, 2048], decoder_channels(1), FlowSpec.for_width(1)).eval()
    with torch.no_grad():
        levels = dec(torch.randn(1, 512, 7, 7), _skips([128, 256, 512, 1024, 2048], 224))
    assert [tuple(l.shape[1:]) for l in levels] == [
        (1024, 7, 7), (512, 14, 14), (256, 28, 28), (128, 56, 56), (64, 112, 112)]


def test_decode_rejects_mismatched_flows():
    dec = FlowDecoder(32, [8, 16, 32, 64, 128], decoder_channels(16), FlowSpec.for_width(16)).eval()
    skips = _skips([8, 16, 32, 64, 128], 64)
    g = torch.randn(1, 32, 2, 2)
    wrong = FlowDecoder(32, [8, 16, 32, 64, 128], decoder_channels(16),
                        FlowSpec(((48, 2), (32, 4), (16, 8), (8, 16)))).eval()
    with torch.no_grad(), pytest.raises(ShapeMismatch):
        dec.decode(g, skips, wrong.flow_maps(g))


def test_flow_reach_zero_context():
    dec = FlowDecoder(32, [8, 16, 32, 64, 128], decoder_channels(16), FlowSpec.for_width(16)).eval()
    with torch.no_grad():
        for f in dec.flow_maps(torch.zeros(2, 32, 2, 2)):
            assert torch.all(f == f.flatten()[0])


def test_output_head():
    head = OutputHead(64, 9).eval()
    with torch.no_grad():
        logits = head(torch.randn(1, 64, 112, 112))
        probs = head.probabilities(logits)
    assert logits.shape == (1, 9, 224, 224)
    s = probs.sum(dim=1)
    assert torch.all((s >= 1 - 1e-5) & (s <= 1 + 1e-5))
    binary = OutputHead(4, 1).eval()
    with torch.no_grad():
        p = binary.probabilities(binary(torch.randn(1, 4, 8, 8)))
    assert p.shape == (1, 1, 16, 16) and torch.all((p >= 0) & (p <= 1))
    uniform = to_probabilities(torch.zeros(1, 9, 2, 2))
    assert torch.allclose(uniform, torch.full_like(uniform, 1 / 9))
