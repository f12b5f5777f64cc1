"""Analytic Llama3-8B memory breakdown (bf16 weights and states, f32 logits)."""

from mstrain.estimator import BF16_MIXED, gib, llama3_8b, predict_peak

SETTINGS = {
    "vanilla": {},
    "recompute + optimizer-in-backward": dict(recompute=True, in_backward=True),
    "  + mini-sequence (4, 16)": dict(recompute=True, in_backward=True, M_mlp=4, M_head=16),
}

if __name__ == "__main__":
    cfg = llama3_8b()
    for name, kw in SETTINGS.items():
        b = predict_peak(cfg, bytes_model=BF16_MIXED, **kw)
        print(f"{name} (peak during {b.phase})")
        for k, v in b.rows().items():
            print(f"  {k:<18} {gib(v):8.2f} GiB")
