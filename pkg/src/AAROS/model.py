from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import GridImage
from .errors import ConfigError, PrerequisiteError, SequenceTooLongError
from .tokenizer import Vocab

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "aaros-checkpoint/1"


@dataclass
class ModelConfig:
    """
    Size of the policy/value transformer. The key dimension of every attention head is d_model / n_heads.
    """

    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_query_len: int = 16
    max_response_len: int = 12
    seed: int = 0

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def max_seq_len(self) -> int:
        # <bos> query <sep> response
        return self.max_query_len + self.max_response_len + 2

    def validate(self) -> None:
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ConfigError("model sizes must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")
        if self.max_query_len < 1 or self.max_response_len < 2:
            raise ConfigError("model.max_query_len must be >= 1 and model.max_response_len >= 2")


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention that also hands back its pre-softmax logits Q K^T / sqrt(d_k).
    """

    def __init__(self, d_model: int, n_heads: int) -> None:
        super().__init__()
        self.n_heads: int = n_heads
        self.d_k: int = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def forward(self, x: Tensor, memory: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
        """
        :param x: Query-side states (B, L, D)
        :param memory: Key/value-side states (B, S, D)
        :param mask: Optional boolean (L, S) or (B, 1, L, S) mask, True where attention is allowed
        :return: The attended states (B, L, D) and the attention logits (B, H, L, S)
        """
        batch, length, d_model = x.shape
        source = memory.shape[1]
        q = self.q_proj(x).view(batch, length, self.n_heads, self.d_k).transpose(1, 2)
        k = self.k_proj(memory).view(batch, source, self.n_heads, self.d_k).transpose(1, 2)
        v = self.v_proj(memory).view(batch, source, self.n_heads, self.d_k).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.d_k)
        scores = logits if mask is None else logits.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        attended = (weights @ v).transpose(1, 2).reshape(batch, length, d_model)
        return self.out_proj(attended), logits


class FeedForward(nn.Sequential):
    def __init__(self, d_model: int, d_ff: int) -> None:
        super().__init__(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))


class EncoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.norm_attn = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x: Tensor) -> Tensor:
        normed = self.norm_attn(x)
        x = x + self.attn(normed, normed)[0]
        return x + self.ff(self.norm_ff(x))


class DecoderLayer(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int) -> None:
        super().__init__()
        self.norm_self = nn.LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(d_model, n_heads)
        self.norm_cross = nn.LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(d_model, n_heads)
        self.norm_ff = nn.LayerNorm(d_model)
        self.ff = FeedForward(d_model, d_ff)

    def forward(self, x: Tensor, memory: Tensor, causal_mask: Tensor) -> tuple[Tensor, Tensor]:
        normed = self.norm_self(x)
        x = x + self.self_attn(normed, normed, causal_mask)[0]
        cross_out, cross_logits = self.cross_attn(self.norm_cross(x), memory)
        x = x + cross_out
        return x + self.ff(self.norm_ff(x)), cross_logits


@dataclass
class PolicyOutput:
    """
    Batched forward results. `cross_logits` has shape (layers, B, heads, L, P).
    """

    logits: Tensor
    values: Tensor
    cross_logits: Tensor


@dataclass
class StepOutputs:
    """
    Per-step outputs for one (image, query, response prefix). Step t predicts response token t from the prefix a_<t,
    so a prefix of length T gives T + 1 steps.
    """

    logits: Tensor
    values: Tensor
    attention: Tensor


class PolicyModel(nn.Module):
    """
    A tiny encoder-decoder transformer. The encoder reads patch features, the decoder reads `<bos> query <sep>
    response` with causal self-attention and cross-attention to the patches. The LM head is the policy and the value
    head reads the same decoder states.
    """

    def __init__(self, config: ModelConfig, vocab: Vocab, feature_dim: int, num_patches: int) -> None:
        """
        :param config: The model size configuration
        :param vocab: The vocabulary of the decoder
        :param feature_dim: The dimension of every patch feature vector
        :param num_patches: The number of patches per image
        """
        super().__init__()
        config.validate()
        self.config: ModelConfig = config
        self.vocab: Vocab = vocab
        self.feature_dim: int = feature_dim
        self.num_patches: int = num_patches

        generator_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        d_model = config.d_model
        self.patch_proj = nn.Linear(feature_dim, d_model)
        self.patch_pos = nn.Embedding(num_patches, d_model)
        self.encoder = nn.ModuleList(
            [EncoderLayer(d_model, config.n_heads, config.d_ff) for _ in range(config.n_layers)]
        )
        self.encoder_norm = nn.LayerNorm(d_model)
        self.token_emb = nn.Embedding(len(vocab), d_model)
        self.token_pos = nn.Embedding(config.max_seq_len, d_model)
        self.decoder = nn.ModuleList(
            [DecoderLayer(d_model, config.n_heads, config.d_ff) for _ in range(config.n_layers)]
        )
        self.decoder_norm = nn.LayerNorm(d_model)
        self.lm_head = nn.Linear(d_model, len(vocab))
        self.value_head = nn.Linear(d_model, 1)
        torch.random.set_rng_state(generator_state)

    def encode(self, patches: Tensor) -> Tensor:
        positions = torch.arange(patches.shape[1], device=patches.device)
        x = self.patch_proj(patches) + self.patch_pos(positions)
        for layer in self.encoder:
            x = layer(x)
        return self.encoder_norm(x)

    def forward(self, patches: Tensor, tokens: Tensor) -> PolicyOutput:
        """
        :param patches: Patch features (B, P, F)
        :param tokens: Right-padded decoder tokens (B, L); causal attention keeps padding out of every real position
        """
        if tokens.shape[1] > self.config.max_seq_len:
            raise SequenceTooLongError(
                f"Decoder input of {tokens.shape[1]} tokens exceeds the maximum of {self.config.max_seq_len}"
            )
        memory = self.encode(patches)
        length = tokens.shape[1]
        positions = torch.arange(length, device=tokens.device)
        x = self.token_emb(tokens) + self.token_pos(positions)
        causal_mask = torch.ones(length, length, dtype=torch.bool, device=tokens.device).tril()
        cross: list[Tensor] = []
        for layer in self.decoder:
            x, cross_logits = layer(x, memory, causal_mask)
            cross.append(cross_logits)
        states = self.decoder_norm(x)
        return PolicyOutput(
            logits=self.lm_head(states),
            values=self.value_head(states).squeeze(-1),
            cross_logits=torch.stack(cross),
        )

    def config_dict(self) -> dict[str, Any]:
        return {
            "model": asdict(self.config),
            "vocab": self.vocab.to_dict(),
            "feature_dim": self.feature_dim,
            "num_patches": self.num_patches,
        }

    def clone(self) -> PolicyModel:
        twin = PolicyModel(self.config, self.vocab, self.feature_dim, self.num_patches)
        twin = twin.to(dtype=next(self.parameters()).dtype)
        twin.load_state_dict(self.state_dict())
        return twin

    def __str__(self) -> str:
        total = sum(parameter.numel() for parameter in self.parameters())
        return (
            f"PolicyModel with {self.config.n_layers} layers, {self.config.n_heads} heads, d_model {self.config.d_model} "
            f"and {total} parameters"
        )


@dataclass
class DecoderBatch:
    """
    Decoder inputs for a batch: `start[b]` is the position of `<sep>`, whose output predicts response token 0.
    """

    patches: Tensor
    tokens: Tensor
    start: Tensor
    lengths: Tensor


def build_batch(
    model: PolicyModel,
    images: Sequence[GridImage],
    queries: Sequence[Sequence[int]],
    prefixes: Sequence[Sequence[int]],
) -> DecoderBatch:
    """
    Lay out `<bos> query <sep> prefix` rows, right-padded, with the matching patch features.

    :param model: The model the batch is for (gives vocabulary, limits, dtype)
    :param images: One image per row; all must share the model's patch count
    :param queries: Query token ids per row
    :param prefixes: Response prefix token ids per row
    """
    config = model.config
    vocab = model.vocab
    rows: list[list[int]] = []
    starts: list[int] = []
    for query, prefix in zip(queries, prefixes, strict=True):
        if len(query) > config.max_query_len:
            raise SequenceTooLongError(f"Query of {len(query)} tokens exceeds max_query_len {config.max_query_len}")
        if len(prefix) > config.max_response_len:
            raise SequenceTooLongError(
                f"Response prefix of {len(prefix)} tokens exceeds max_response_len {config.max_response_len}"
            )
        rows.append([vocab.bos_id, *query, vocab.sep_id, *prefix])
        starts.append(len(query) + 1)
    width = max(len(row) for row in rows)
    tokens = torch.full((len(rows), width), vocab.pad_id, dtype=torch.long)
    for index, row in enumerate(rows):
        tokens[index, : len(row)] = torch.tensor(row, dtype=torch.long)
    dtype = next(model.parameters()).dtype
    patches = torch.stack([torch.as_tensor(image.patch_features, dtype=dtype) for image in images])
    if patches.shape[1] != model.num_patches:
        raise ValueError(f"Images have {patches.shape[1]} patches but the model expects {model.num_patches}")
    return DecoderBatch(
        patches=patches,
        tokens=tokens,
        start=torch.tensor(starts, dtype=torch.long),
        lengths=torch.tensor([len(prefix) for prefix in prefixes], dtype=torch.long),
    )


def gather_steps(values: Tensor, start: Tensor, num_steps: int) -> Tensor:
    """
    Select `num_steps` consecutive positions beginning at `start[b]` along dim 1 of a (B, L, ...) tensor. Positions
    past the end are clamped; callers mask them with the prefix lengths.
    """
    offsets = torch.arange(num_steps, device=start.device)
    index = (start[:, None] + offsets[None, :]).clamp(max=values.shape[1] - 1)
    rows = torch.arange(values.shape[0], device=start.device)[:, None]
    return values[rows, index]


def forward(model: PolicyModel, image: GridImage, query: Sequence[int], response_prefix: Sequence[int]) -> StepOutputs:
    """
    Run the model on one (image, query, prefix) and return the response steps: logits (T+1, V), values (T+1,) and
    cross-attention logits (layers, heads, T+1, P).
    """
    batch = build_batch(model, [image], [query], [response_prefix])
    output = model(batch.patches, batch.tokens)
    num_steps = len(response_prefix) + 1
    start = int(batch.start[0])
    return StepOutputs(
        logits=output.logits[0, start : start + num_steps],
        values=output.values[0, start : start + num_steps],
        attention=output.cross_logits[:, 0, :, start : start + num_steps],
    )


def cross_attention_slice(
    maps: Tensor,
    token_positions: Sequence[int],
    patch_set: Sequence[int] | None = None,
    layer_select: int = -1,
    head_reduce: str = "mean",
) -> Tensor:
    """
    Pre-softmax cross-attention logits Q_i K_j / sqrt(d_k) for the decoder steps in `token_positions`.

    :param maps: Cross-attention logits of one sequence, shape (layers, heads, steps, P)
    :param token_positions: The decoder steps to keep (rows); may be empty
    :param patch_set: Only checked for range; column selection happens in the reward
    :param layer_select: The layer to read, the last one by default
    :param head_reduce: "mean" averages the heads, "none" keeps them (heads, |N|, P)
    :return: A (|N|, P) matrix of logits
    """
    num_layers, num_heads, num_steps, num_patches = maps.shape
    positions = list(token_positions)
    if any(not 0 <= position < num_steps for position in positions):
        raise IndexError(f"Token positions {positions} fall outside {num_steps} decoder steps")
    if patch_set is not None and any(not 0 <= patch < num_patches for patch in patch_set):
        raise IndexError(f"Patch indices fall outside {num_patches} patches")
    layer = maps[layer_select]
    if not positions:
        return layer.new_zeros((0, num_patches))
    rows = layer[:, positions, :]
    match head_reduce:
        case "mean":
            return rows.mean(dim=0)
        case "none":
            return rows
        case _:
            raise ValueError(f"Unsupported head_reduce '{head_reduce}'")


@dataclass(frozen=True)
class Candidate:
    """
    One sampled response: generated token ids (ending at EOS or at the length limit) and the log-probability of
    every generated token under the truncated, renormalised sampling distribution.
    """

    tokens: tuple[int, ...]
    logprobs: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.tokens)


def truncated_distribution(logits: Tensor, temperature: float, top_p: float) -> Tensor:
    """
    Temperature-scaled softmax restricted to the smallest set of tokens whose cumulative probability reaches `top_p`,
    renormalised.
    """
    probs = torch.softmax(logits / temperature, dim=-1)
    if top_p >= 1.0:
        return probs
    sorted_probs, sorted_index = torch.sort(probs, dim=-1, descending=True)
    exclusive_mass = sorted_probs.cumsum(dim=-1) - sorted_probs
    sorted_probs = sorted_probs.masked_fill(exclusive_mass >= top_p, 0.0)
    kept = torch.zeros_like(probs).scatter(-1, sorted_index, sorted_probs)
    return kept / kept.sum(dim=-1, keepdim=True)


@torch.no_grad()
def sample_batch(
    model: PolicyModel,
    images: Sequence[GridImage],
    queries: Sequence[Sequence[int]],
    k: int,
    temperature: float = 0.9,
    top_p: float = 0.9,
    generator: torch.Generator | None = None,
    greedy: bool = False,
    max_new_tokens: int | None = None,
) -> list[list[Candidate]]:
    """
    Sample `k` candidates for every (image, query) pair in one batched decoding loop.

    :param model: The frozen policy
    :param images: The images to diagnose
    :param queries: Query token ids, one per image
    :param k: Candidates per query
    :param temperature: Softmax temperature, > 0
    :param top_p: Nucleus threshold in (0, 1]
    :param generator: The random generator driving the draws
    :param greedy: Decode the argmax instead of sampling; recorded log-probs are then the untempered log-softmax
    :param max_new_tokens: Optional cap below the model's max_response_len
    :return: `k` candidates per query, in input order
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not 0.0 < top_p <= 1.0:
        raise ValueError("top_p must lie in (0, 1]")
    vocab = model.vocab
    limit = model.config.max_response_len if max_new_tokens is None else min(max_new_tokens, model.config.max_response_len)
    rows_images = [image for image in images for _ in range(k)]
    rows_queries = [list(query) for query in queries for _ in range(k)]
    batch = build_batch(model, rows_images, rows_queries, [[] for _ in rows_queries])
    num_rows = len(rows_queries)

    width = int(batch.start.max()) + 1 + limit
    tokens = torch.full((num_rows, width), vocab.pad_id, dtype=torch.long)
    tokens[:, : batch.tokens.shape[1]] = batch.tokens
    cursor = batch.start.clone()
    finished = torch.zeros(num_rows, dtype=torch.bool)
    generated: list[list[int]] = [[] for _ in range(num_rows)]
    logprobs: list[list[float]] = [[] for _ in range(num_rows)]
    rows = torch.arange(num_rows)

    for _ in range(limit):
        view = int(cursor.max()) + 1
        output = model(batch.patches, tokens[:, :view])
        step_logits = output.logits[rows, cursor]
        if greedy:
            next_tokens = step_logits.argmax(dim=-1)
            step_logprobs = torch.log_softmax(step_logits, dim=-1).gather(-1, next_tokens[:, None]).squeeze(-1)
        else:
            distribution = truncated_distribution(step_logits, temperature, top_p)
            next_tokens = torch.multinomial(distribution, 1, generator=generator).squeeze(-1)
            step_logprobs = distribution.gather(-1, next_tokens[:, None]).squeeze(-1).log()
        for row in range(num_rows):
            if finished[row]:
                continue
            token = int(next_tokens[row])
            generated[row].append(token)
            logprobs[row].append(float(step_logprobs[row]))
            tokens[row, cursor[row] + 1] = token
            if token == vocab.eos_id:
                finished[row] = True
        cursor = torch.where(finished, cursor, cursor + 1)
        # Finished rows keep their cursor; clamp keeps the view inside the buffer
        cursor = cursor.clamp(max=width - 2)
        if bool(finished.all()):
            break

    candidates = [Candidate(tuple(generated[row]), tuple(logprobs[row])) for row in range(num_rows)]
    return [candidates[index * k : (index + 1) * k] for index in range(len(images))]


def sample_candidates(
    model: PolicyModel,
    image: GridImage,
    query: Sequence[int],
    k: int,
    temperature: float = 0.9,
    top_p: float = 0.9,
    seed: int = 0,
    greedy: bool = False,
    max_new_tokens: int | None = None,
) -> list[Candidate]:
    """
    Sample `k` responses for one query; deterministic given `seed`.
    """
    generator = torch.Generator().manual_seed(seed)
    return sample_batch(
        model,
        [image],
        [query],
        k,
        temperature=temperature,
        top_p=top_p,
        generator=generator,
        greedy=greedy,
        max_new_tokens=max_new_tokens,
    )[0]


def save_checkpoint(model: PolicyModel, path: str | Path, metadata: dict[str, Any] | None = None) -> Path:
    """
    Write a self-describing checkpoint: format tag, model/vocab configuration, parameter tensors and metadata.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": model.config_dict(),
            "dtype": str(next(model.parameters()).dtype),
            "state_dict": model.state_dict(),
            "metadata": metadata or {},
        },
        path,
    )
    logger.info("Saved checkpoint %s", path)
    return path


def load_checkpoint(path: str | Path) -> tuple[PolicyModel, dict[str, Any]]:
    """
    Rebuild a model from a checkpoint; forward outputs match the saved model bit for bit.
    """
    path = Path(path)
    if not path.exists():
        raise PrerequisiteError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise PrerequisiteError(f"{path} is not an AAROS checkpoint")
    config = payload["config"]
    model = PolicyModel(
        ModelConfig(**config["model"]),
        Vocab.from_dict(config["vocab"]),
        config["feature_dim"],
        config["num_patches"],
    )
    if payload.get("dtype") == str(torch.float64):
        model = model.double()
    model.load_state_dict(payload["state_dict"])
    return model, payload.get("metadata", {})


def sequence_logprobs(logits: Tensor, targets: Tensor, temperature: float = 1.0) -> tuple[Tensor, Tensor]:
    """
    Per-step log-probabilities of `targets` and per-step entropies of the temperature-scaled policy.

    :param logits: (..., V) step logits
    :param targets: (...) target ids
    """
    log_probs = F.log_softmax(logits / temperature, dim=-1)
    chosen = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    entropy = -(log_probs.exp() * log_probs).sum(dim=-1)
    return chosen, entropy
