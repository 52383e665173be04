#!/usr/bin/env python3
"""Build small random HuggingFace models plus reference logits for the engine tests.

Writes one directory per model under OUT (config.json, model.safetensors,
reference.json). reference.json follows the oracle bundle schema
{model, prompts, ids, logits, checksums} with full final-position logits.
"""

import argparse
import hashlib
import json
import pathlib

import torch
from transformers import GPT2Config, GPT2LMHeadModel, GPTNeoXConfig, GPTNeoXForCausalLM

VOCAB = 96
SEQUENCES = [[3], [5, 17, 2, 90, 44], [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13], [95, 0, 95, 0, 31, 31, 31]]


def sha256(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def perturb(model, seed):
    # default init leaves LayerNorm at (1, 0) and biases at 0; make every parameter matter
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            noise = torch.randn(p.shape, generator=g)
            if name.endswith("weight") and p.dim() == 1:
                p.copy_(1.0 + 0.1 * noise)
            elif p.dim() == 1:
                p.copy_(0.1 * noise)
            else:
                p.copy_(0.2 * noise)


def build(kind):
    if kind == "gpt2":
        cfg = GPT2Config(vocab_size=VOCAB, n_positions=32, n_embd=32, n_layer=2, n_head=4, n_inner=80,
                         resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0)
        return GPT2LMHeadModel(cfg)
    parallel = kind == "neox_parallel"
    cfg = GPTNeoXConfig(vocab_size=VOCAB, hidden_size=32, num_hidden_layers=2, num_attention_heads=4,
                        intermediate_size=72, max_position_embeddings=32, rotary_pct=0.5, rotary_emb_base=10000,
                        use_parallel_residual=parallel, tie_word_embeddings=False, hidden_act="gelu",
                        attention_dropout=0.0, hidden_dropout=0.0)
    return GPTNeoXForCausalLM(cfg)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    for i, kind in enumerate(["gpt2", "neox_parallel", "neox_sequential"]):
        torch.manual_seed(args.seed + i)
        model = build(kind).eval()
        perturb(model, args.seed + 100 + i)
        d = args.out / kind
        d.mkdir(parents=True, exist_ok=True)
        model.save_pretrained(d, safe_serialization=True)
        logits = []
        with torch.no_grad():
            for ids in SEQUENCES:
                out = model(torch.tensor([ids])).logits[0, -1]
                logits.append([float(x) for x in out.float()])
        bundle = {
            "model": kind,
            "prompts": [" ".join(map(str, ids)) for ids in SEQUENCES],
            "ids": SEQUENCES,
            "logits": logits,
            "checksums": {"model.safetensors": sha256(d / "model.safetensors")},
        }
        (d / "reference.json").write_text(json.dumps(bundle) + "\n")
        for extra in ("generation_config.json",):
            (d / extra).unlink(missing_ok=True)


if __name__ == "__main__":
    main()
