import numpy as np
import pytest
import torch

from openintent.data_structures import LabeledInstance
from openintent.errors import CheckpointError, EmbeddingError
from openintent.model import (
    ClassifierHead,
    EncoderModel,
    SentenceEncodeFunction,
    creat_mask_from_input_ids,
    encode,
    encode_backward,
    encode_dataset,
    generate_batch,
    load_precomputed,
    mean_pooling,
)


def test_creat_mask_from_input_ids():
    input_ids = torch.tensor(
        [
            [1, 2, 3],
            [1, 2, 0],
        ],
        dtype=torch.long,
    )

    mask = creat_mask_from_input_ids(input_ids, 0)

    assert torch.equal(
        mask,
        torch.tensor(
            [
                [1, 1, 1],
                [1, 1, 0],
            ],
            dtype=torch.bool,
        ),
    )


def test_mean_pooling():
    hidden_states = torch.tensor(
        [
            [[1, 2, 3], [4, 5, 6], [7, 8, 9]],
            [[1, 2, 3], [5, 6, 7], [10, 11, 12]],
        ],
        dtype=torch.float,
    )
    mask = torch.tensor(
        [
            [1, 1, 1],
            [1, 1, 0],
        ],
        dtype=torch.bool,
    )

    pooled = mean_pooling(hidden_states, mask)

    assert torch.allclose(
        pooled,
        torch.tensor(
            [
                [4, 5, 6],
                [3, 4, 5],
            ],
            dtype=torch.float,
        ),
    )


def set_parameters(model: EncoderModel, token_embeddings: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor):
    with torch.no_grad():
        model.token_embeddings.copy_(token_embeddings)
        model.projection.weight.copy_(weight)
        model.projection.bias.copy_(bias)


def test_encode_single_token_is_normalized_embedding():
    model = EncoderModel(vocab_size=3, token_dim=3, hidden_size=3)
    token_embeddings = torch.tensor([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.3, 0.4, 1.2]])
    set_parameters(model, token_embeddings, torch.eye(3), torch.zeros(3))

    batch = encode(model, [LabeledInstance(token_ids=[2], label_id=0)])

    assert torch.allclose(batch.embeddings[0], torch.tensor([0.3, 0.4, 1.2]) / 1.3)
    assert torch.allclose(batch.pre_norm[0], torch.tensor([0.3, 0.4, 1.2]))


def test_encode_zero_pre_norm_vector():
    model = EncoderModel(vocab_size=4, token_dim=2, hidden_size=2)
    token_embeddings = torch.tensor([[0.0, 0.0], [0.0, 0.0], [0.5, 0.2], [-0.5, -0.2]])
    set_parameters(model, token_embeddings, torch.eye(2), torch.zeros(2))

    with pytest.raises(EmbeddingError, match='instance 1 has a zero pre-norm vector'):
        encode(model, [LabeledInstance([2], 0), LabeledInstance([2, 3], 0)])

    allowed = encode_dataset(model, [LabeledInstance([2], 0), LabeledInstance([2, 3], 0)], allow_dead=True)
    assert torch.allclose(allowed[0].norm(), torch.tensor(1.0))
    assert not allowed[1].any()


def test_encode_rejects_non_finite_parameters():
    model = EncoderModel(vocab_size=4, token_dim=2, hidden_size=2)
    with torch.no_grad():
        model.projection.weight[0, 0] = float('nan')

    with pytest.raises(EmbeddingError, match='non-finite'):
        encode(model, [LabeledInstance([2], 0)])


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_embeddings_have_unit_norm(seed: int):
    model = EncoderModel(vocab_size=50, token_dim=16, hidden_size=12, seed=seed)
    generator = torch.Generator().manual_seed(seed)
    token_ids = torch.randint(2, 50, (20, 7), generator=generator)

    embeddings = model(token_ids)

    assert torch.allclose(embeddings.norm(dim=-1), torch.ones(20), atol=1e-6)


def test_encode_backward_special_cases():
    model = EncoderModel(vocab_size=10, token_dim=4, hidden_size=4, seed=3)
    with torch.no_grad():
        model.projection.bias.fill_(0.5)
    token_ids = torch.tensor([[2, 3, 4]])

    zero = encode_backward(model, token_ids, torch.zeros(1, 4))
    assert not zero.token_embeddings.any()
    assert not zero.weight.any()
    assert not zero.bias.any()

    radial = encode_backward(model, token_ids, 2.5 * encode(model, token_ids).embeddings)
    assert torch.allclose(radial.bias, torch.zeros(4), atol=1e-6)
    assert torch.allclose(radial.weight, torch.zeros(4, 4), atol=1e-6)

    with pytest.raises(EmbeddingError, match='upstream gradient shape'):
        encode_backward(model, token_ids, torch.zeros(2, 4))


@pytest.mark.parametrize('seed', [0, 1, 2])
def test_encoder_gradient_matches_finite_differences(seed: int):
    generator = torch.Generator().manual_seed(seed)
    token_embeddings = (torch.rand(10, 4, generator=generator, dtype=torch.float64) * 2 - 1).requires_grad_()
    weight = (torch.rand(4, 4, generator=generator, dtype=torch.float64) - 0.5).requires_grad_()
    # units 0, 1, 3 stay active and unit 2 stays dead for every input, away from the ReLU kink
    bias = torch.tensor([3.0, 3.0, -3.0, 3.0], dtype=torch.float64, requires_grad=True)
    token_ids = torch.tensor([[1, 2, 3, 0], [4, 5, 0, 0], [6, 7, 8, 9], [9, 2, 2, 0]])

    assert torch.autograd.gradcheck(
        lambda t, w, b: SentenceEncodeFunction.apply(t, w, b, token_ids),
        (token_embeddings, weight, bias),
        eps=1e-4,
        atol=1e-6,
        rtol=1e-4,
    )


def test_encoder_save_and_load(tmp_path):
    model = EncoderModel(vocab_size=20, token_dim=6, hidden_size=5, seed=4)
    path = tmp_path / 'encoder.ckpt'

    model.save(path)
    loaded = EncoderModel.load(path)

    token_ids = torch.tensor([[2, 3, 4], [5, 6, 0]])
    assert loaded.header() == model.header()
    assert torch.equal(loaded(token_ids), model(token_ids))

    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match='expected'):
        EncoderModel.load(path)
    with pytest.raises(CheckpointError, match='not found'):
        EncoderModel.load(tmp_path / 'missing.ckpt')


@pytest.mark.parametrize('header', [b'not json', b'{"vocab_size": 20, "d_tok": 6}', b'[20, 6, 5]'])
def test_encoder_load_rejects_corrupt_header(tmp_path, header: bytes):
    path = tmp_path / 'encoder.ckpt'
    path.write_bytes(header + b'\n' + bytes(16))

    with pytest.raises(CheckpointError, match='header'):
        EncoderModel.load(path)


def test_encode_dataset():
    model = EncoderModel(vocab_size=20, token_dim=6, hidden_size=5, seed=4)
    instances = [LabeledInstance([2 + i % 10, 3], 0) for i in range(7)]

    embeddings = encode_dataset(model, instances, batch_size=3)

    assert embeddings.shape == (7, 5)
    assert torch.allclose(embeddings[0], encode(model, instances[:1]).embeddings[0])


def test_generate_batch():
    assert list(generate_batch(range(5), batch_size=2)) == [[0, 1], [2, 3], [4]]


def test_classifier_head():
    head = ClassifierHead(hidden_size=4, num_known=3, generator=torch.Generator().manual_seed(0))

    assert head(torch.zeros(2, 4)).shape == (2, 3)
    assert not head.bias.any()


def test_load_precomputed(tmp_path):
    path = tmp_path / 'train.npy'
    np.save(path, np.array([[3.0, 4.0], [0.0, 2.0]]))

    table = load_precomputed(path, hidden_size=2)
    assert torch.allclose(table.embeddings, torch.tensor([[0.6, 0.8], [0.0, 1.0]]))
    assert torch.equal(table.for_instances([LabeledInstance([1], 0, source_index=1)]), table[[1]])

    with pytest.raises(EmbeddingError, match='dimension'):
        load_precomputed(path, hidden_size=3)

    np.save(path, np.array([[np.nan, 1.0]]))
    with pytest.raises(EmbeddingError, match='non-finite'):
        load_precomputed(path)
