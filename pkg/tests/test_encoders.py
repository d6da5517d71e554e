# tests/test_encoders.py

import pytest
import torch

from app.diffmath import DTYPE
from app.models.encoders import (
    PromptBundle,
    VideoPromptState,
    build_class_prompts,
    embed_description,
    encode_text,
    encode_video,
    video_prompt_step,
)
from app.models.knowledge import extract_keywords, load_class_knowledge
from app.models.transformer import FrozenTextEncoder, FrozenVisionEncoder
from app.numtext.vocab import default_vocabulary
from app.utils.errors import ConfigError, ModelError, SequenceTooLongError

D = 16


@pytest.fixture(scope="module")
def text_encoder():
    return FrozenTextEncoder(default_vocabulary(), d=D, n_layers=2, n_heads=2, max_len=32, seed=0)


@pytest.fixture(scope="module")
def vision_encoder():
    return FrozenVisionEncoder(d=D, n_layers=2, n_heads=2, seed=1)


@pytest.fixture(scope="module")
def knowledge():
    return load_class_knowledge("gait_scoring")


def _state():
    return VideoPromptState(d=D, n_layers=2, f_in=4, window=12, n_global=1, seed=0)


def _frames(seed, batch=None):
    gen = torch.Generator().manual_seed(seed)
    shape = (12, 4) if batch is None else (batch, 12, 4)
    return torch.randn(*shape, generator=gen, dtype=DTYPE)


# --- class knowledge ---

def test_knowledge_has_one_record_per_class(knowledge):
    assert [c.name for c in knowledge] == ["normal", "slight", "mild", "moderate"]
    assert all(c.keywords for c in knowledge)
    assert len(load_class_knowledge("dementia_group")) == 3


def test_unknown_task():
    with pytest.raises(ConfigError):
        load_class_knowledge("running")


def test_keywords_single_word():
    assert extract_keywords("Shuffling", k=3) == ["shuffling"]


def test_keywords_shared_word_ranks_last():
    corpus = ["walking slow", "walking fast"]
    assert extract_keywords("walking slow", k=1, corpus=corpus) == ["slow"]
    assert extract_keywords("walking slow", k=2, corpus=corpus) == ["slow", "walking"]


def test_keywords_ties_break_lexicographically():
    assert extract_keywords("steady gait", k=2, corpus=["steady gait", "slow"]) == ["gait", "steady"]


def test_keywords_are_deterministic(knowledge):
    corpus = [c.description for c in knowledge]
    first = extract_keywords(corpus[2], 5, corpus)
    assert first == extract_keywords(corpus[2], 5, corpus)
    assert len(first) == 5


def test_keywords_need_positive_k():
    with pytest.raises(ValueError):
        extract_keywords("steady", k=0)


# --- description embedding ---

def test_description_embedding_is_deterministic(knowledge, text_encoder):
    desc = knowledge[0].description
    assert torch.equal(embed_description(desc, text_encoder), embed_description(desc, text_encoder))


def test_duplicated_description_has_same_mean(knowledge, text_encoder):
    desc = knowledge[1].description
    once = embed_description(desc, text_encoder)
    twice = embed_description(f"{desc} {desc}", text_encoder)
    assert torch.allclose(once, twice, atol=1e-12, rtol=0)


def test_class_descriptions_are_distinguishable(knowledge, text_encoder):
    a = embed_description(knowledge[0].description, text_encoder)
    b = embed_description(knowledge[3].description, text_encoder)
    assert float(a @ b / (a.norm() * b.norm())) < 0.999


@pytest.mark.parametrize("desc", ["", "   ", "zzzq qqqz"])
def test_description_without_usable_words(desc, text_encoder):
    with pytest.raises(ModelError):
        embed_description(desc, text_encoder)


# --- text prompts ---

def test_zero_description_embedding_leaves_context(knowledge):
    bundle = PromptBundle(4, d=D, k_ctx=3, proj_bias=False)
    prompts = build_class_prompts(knowledge, bundle, desc_embeddings=torch.zeros(4, D, dtype=DTYPE))
    assert torch.equal(prompts, bundle.ctx)


def test_prompts_shape_and_class_count(knowledge, text_encoder):
    bundle = PromptBundle(4, d=D, k_ctx=3)
    assert build_class_prompts(knowledge, bundle, text_encoder).shape == (4, 3, D)
    with pytest.raises(ModelError):
        build_class_prompts(knowledge[:3], bundle, text_encoder)


def test_per_class_projection(knowledge, text_encoder):
    bundle = PromptBundle(4, d=D, k_ctx=2, per_class_projection=True)
    assert bundle.proj_w1.shape[0] == 4
    assert build_class_prompts(knowledge, bundle, text_encoder).shape == (4, 2, D)


def test_without_kapt_context_is_plain(knowledge):
    bundle = PromptBundle(4, d=D, k_ctx=2, use_kapt=False)
    assert build_class_prompts(knowledge, bundle) is bundle.ctx


def test_text_features_are_unit_rows(knowledge, text_encoder):
    f_t = encode_text(PromptBundle(4, d=D, k_ctx=2), knowledge, text_encoder)
    assert f_t.shape == (4, D)
    assert torch.allclose(f_t.norm(dim=-1), torch.ones(4, dtype=DTYPE), atol=1e-12, rtol=0)


def test_context_change_is_isolated_per_class(knowledge, text_encoder):
    bundle = PromptBundle(4, d=D, k_ctx=2)
    with torch.no_grad():
        before = encode_text(bundle, knowledge, text_encoder)
        bundle.ctx[1] += 0.5
        after = encode_text(bundle, knowledge, text_encoder)
    assert not torch.allclose(before[1], after[1])
    for i in (0, 2, 3):
        assert torch.allclose(before[i], after[i], atol=1e-12, rtol=0)


def test_gradients_reach_prompts_not_encoder(knowledge, text_encoder):
    bundle = PromptBundle(4, d=D, k_ctx=2)
    encode_text(bundle, knowledge, text_encoder)[:, 0].sum().backward()
    for name, p in bundle.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    assert text_encoder.frozen
    assert all(p.grad is None for p in text_encoder.parameters())


def test_sequence_too_long(knowledge):
    short = FrozenTextEncoder(default_vocabulary(), d=D, n_layers=1, n_heads=2, max_len=6, seed=0)
    with pytest.raises(SequenceTooLongError):
        encode_text(PromptBundle(4, d=D, k_ctx=6, use_kapt=False), knowledge, short)


# --- video prompts ---

def test_zero_input_gives_zero_summary_and_local():
    state = _state()
    with torch.no_grad():
        s, g, l = video_prompt_step(torch.zeros(12, D, dtype=DTYPE), state, 1)
    assert s.shape == (1, D) and g.shape == (1, D) and l.shape == (12, D)
    assert torch.equal(s, torch.zeros_like(s))
    assert torch.equal(l, torch.zeros_like(l))
    assert torch.equal(g, state.global_tokens[0])


def test_global_tokens_ignore_input():
    state = _state()
    with torch.no_grad():
        _, g1, _ = video_prompt_step(torch.randn(12, D, dtype=DTYPE), state, 2)
        _, g2, _ = video_prompt_step(torch.randn(12, D, dtype=DTYPE), state, 2)
    assert torch.equal(g1, g2)


def test_local_token_depends_on_its_frame_only():
    state = _state()
    z = torch.randn(12, D, generator=torch.Generator().manual_seed(2), dtype=DTYPE)
    bumped = z.clone()
    bumped[5] += 1.0
    with torch.no_grad():
        _, _, a = video_prompt_step(z, state, 1)
        _, _, b = video_prompt_step(bumped, state, 1)
    changed = [t for t in range(12) if not torch.equal(a[t], b[t])]
    assert changed == [5]


@pytest.mark.parametrize("layer", [0, 3])
def test_layer_index_out_of_range(layer):
    with pytest.raises(ModelError):
        video_prompt_step(torch.zeros(12, D, dtype=DTYPE), _state(), layer)


def test_video_feature_is_unit_and_deterministic(vision_encoder):
    state = _state()
    with torch.no_grad():
        a = encode_video(_frames(0), state, vision_encoder)
        b = encode_video(_frames(0), state, vision_encoder)
        batch = encode_video(_frames(1, batch=3), state, vision_encoder)
    assert a.shape == (D,)
    assert abs(float(a.norm()) - 1.0) < 1e-12
    assert torch.equal(a, b)
    assert batch.shape == (3, D)


@pytest.mark.parametrize("shape", [(11, 4), (12, 5)])
def test_wrong_clip_shape(shape, vision_encoder):
    with pytest.raises(ModelError):
        encode_video(torch.zeros(*shape, dtype=DTYPE), _state(), vision_encoder)


def test_mismatched_vision_encoder():
    with pytest.raises(ModelError):
        encode_video(_frames(0), _state(), FrozenVisionEncoder(d=D, n_layers=3, n_heads=2))


def test_video_gradients_reach_prompt_state_only(vision_encoder):
    state = _state()
    encode_video(_frames(3, batch=2), state, vision_encoder)[:, 0].sum().backward()
    for name, p in state.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name
    assert vision_encoder.frozen
    assert all(p.grad is None for p in vision_encoder.parameters())
