#!/usr/bin/env python3
"""
GPT-2 Checkpoint Conversion
Converts a locally available Hugging Face GPT-2 checkpoint into the weight
container, exports its tokenizer files and reference logits for the smoke suite.

Requires requirements-convert.txt (torch, transformers).
"""

import sys
import json
import argparse
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "core"))

from model_config import ModelConfig, LayerWeights, WeightStore, Layout, Activation, HeadKind, save_weights

# Prompts whose reference logits the smoke suite compares against
REFERENCE_PROMPTS = [
    "Beats Music is owned by",
    "The Eiffel Tower is located in the city of",
    "Barack Obama was born in",
    "The capital of Japan is",
    "Toyota Camry is produced by",
]


def to_numpy(tensor) -> np.ndarray:
    return tensor.detach().cpu().numpy().astype(np.float32)


def convert_state(model) -> tuple:
    """Map GPT-2 Conv1D weights (x @ W layout) onto the container's tensors"""
    hf = model.config
    config = ModelConfig(
        n_layers=hf.n_layer,
        n_heads=hf.n_head,
        d_model=hf.n_embd,
        d_inner=hf.n_inner or 4 * hf.n_embd,
        vocab_size=hf.vocab_size,
        max_positions=hf.n_positions,
        layout=Layout.SERIAL,
        activation=Activation.GELU,
        head_kind=HeadKind.TIED_EMBEDDING,
        norm_epsilon=hf.layer_norm_epsilon,
    )
    d = config.d_model
    state = {name: to_numpy(t) for name, t in model.transformer.state_dict().items()}

    layers = []
    for i in range(config.n_layers):
        p = f"h.{i}."
        c_attn_w = state[p + "attn.c_attn.weight"]      # d × 3d
        c_attn_b = state[p + "attn.c_attn.bias"]
        layers.append(LayerWeights(
            ln_1_scale=state[p + "ln_1.weight"], ln_1_bias=state[p + "ln_1.bias"],
            w_q=c_attn_w[:, :d].copy(), w_k=c_attn_w[:, d:2 * d].copy(), w_v=c_attn_w[:, 2 * d:].copy(),
            w_o=state[p + "attn.c_proj.weight"],
            b_q=c_attn_b[:d].copy(), b_k=c_attn_b[d:2 * d].copy(), b_v=c_attn_b[2 * d:].copy(),
            b_o=state[p + "attn.c_proj.bias"],
            ln_2_scale=state[p + "ln_2.weight"], ln_2_bias=state[p + "ln_2.bias"],
            w_in=state[p + "mlp.c_fc.weight"].T.copy(), b_in=state[p + "mlp.c_fc.bias"],
            w_out=state[p + "mlp.c_proj.weight"].T.copy(), b_out=state[p + "mlp.c_proj.bias"],
        ))

    weights = WeightStore(
        embedding=state["wte.weight"],
        position_embeddings=state["wpe.weight"],
        layers=layers,
        final_norm_scale=state["ln_f.weight"],
        final_norm_bias=state["ln_f.bias"],
    )
    weights.validate(config)
    return config, weights


def export_reference_logits(model, tokenizer, path: Path):
    import torch

    records = []
    with torch.no_grad():
        for prompt in REFERENCE_PROMPTS:
            ids = tokenizer.encode(prompt)
            logits = model(torch.tensor([ids])).logits[0, -1]
            records.append({"prompt": prompt, "token_ids": ids, "logits": logits.tolist()})
    path.write_text(json.dumps(records), encoding="utf-8")


def main():
    parser = argparse.ArgumentParser(description="Convert a local GPT-2 checkpoint to the weight container")
    parser.add_argument('checkpoint', type=str, help='Directory holding a Hugging Face GPT-2 checkpoint')
    parser.add_argument('--out-dir', type=str, default='../models', help='Destination directory')
    parser.add_argument('--name', type=str, default='gpt2-small', help='File name stem')
    args = parser.parse_args()

    from transformers import GPT2LMHeadModel, GPT2TokenizerFast

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    print("🔧 GPT-2 CHECKPOINT CONVERSION")
    print("=" * 50)

    model = GPT2LMHeadModel.from_pretrained(args.checkpoint, local_files_only=True).eval()
    tokenizer = GPT2TokenizerFast.from_pretrained(args.checkpoint, local_files_only=True)

    config, weights = convert_state(model)
    weights_path = out_dir / f"{args.name}.rpwt"
    save_weights(weights_path, config, weights)
    print(f"Weights: {weights_path} (L={config.n_layers}, H={config.n_heads}, "
          f"d={config.d_model}, |V|={config.vocab_size})")

    vocab_file, merges_file = tokenizer.save_vocabulary(str(out_dir), filename_prefix=args.name)
    print(f"Tokenizer: {vocab_file}, {merges_file}")

    reference_path = out_dir / f"{args.name}.reference_logits.json"
    export_reference_logits(model, tokenizer, reference_path)
    print(f"Reference logits: {reference_path} ({len(REFERENCE_PROMPTS)} prompts)")


if __name__ == "__main__":
    main()
