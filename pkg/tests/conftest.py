"""Shared helpers: finite-difference gradient checking and tiny fixtures."""

import math

import torch


def guarded_rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1.0)


def fd_check(
    model: torch.nn.Module,
    loss_fn,
    eps: float,
    coords_per_tensor: int = 2,
    seed: int = 0,
    skip_if=None,
):
    """Central finite differences against autograd for sampled coordinates.

    loss_fn() evaluates the loss from the model's current parameters.
    Picks the largest-gradient coordinates of every parameter tensor, so the
    comparison happens where the signal is. Returns the max guarded relative
    error over all checked coordinates. skip_if, when given, is called after
    each perturbation; returning True drops that coordinate (used to discard
    perturbations that flip a discrete rollout choice).
    """
    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    grads = {
        name: p.grad.detach().clone()
        for name, p in model.named_parameters()
        if p.grad is not None
    }
    worst = 0.0
    checked = 0
    for name, p in model.named_parameters():
        if name not in grads:
            continue
        g = grads[name]
        flat = g.abs().flatten()
        k = min(coords_per_tensor, flat.numel())
        idx = torch.topk(flat, k).indices
        for i in idx.tolist():
            with torch.no_grad():
                orig = p.data.flatten()[i].item()
                p.data.flatten()[i] = orig + eps
            plus = float(loss_fn())
            bad = skip_if() if skip_if is not None else False
            with torch.no_grad():
                p.data.flatten()[i] = orig - eps
            minus = float(loss_fn())
            bad = bad or (skip_if() if skip_if is not None else False)
            with torch.no_grad():
                p.data.flatten()[i] = orig
            if bad:
                continue
            fd = (plus - minus) / (2 * eps)
            worst = max(worst, guarded_rel_err(fd, g.flatten()[i].item()))
            checked += 1
    assert checked > 0, "no finite-difference coordinates were checked"
    return worst


def log_softmax_by_hand(z: list[float]) -> list[float]:
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return [v - lse for v in z]


def build_copy_model(n_content: int = 4, max_pos: int = 12):
    """Hand-built weights that make greedy generation copy the input.

    Cross-attention addresses encoder position t+1 from decoder position t
    over one-hot token/position blocks; the encoder's end marker then stops
    generation after the last copied token.
    """
    from styleforge.model import ModelConfig, build_model
    from styleforge.tokenizer import N_SPECIALS

    vocab = N_SPECIALS + n_content
    d = vocab + max_pos
    config = ModelConfig(
        vocab_size=vocab, n_layers=1, n_heads=1, embed_dim=d,
        ffn_dim=4, dropout=0.0, max_positions=max_pos, tie_embeddings=False,
    )
    model = build_model(config, seed=0, dtype=torch.float64)
    s, g, h = 1.0, 8.0, 12.0
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        for name, p in model.named_parameters():
            if p.dim() == 1 and not name.endswith("bias"):
                p.fill_(1.0)
        for v in range(vocab):
            model.token_emb.weight[v, v] = s
        for p_ in range(max_pos):
            model.enc_pos.weight[p_, vocab + p_] = s
            model.dec_pos.weight[p_, vocab + p_] = s
        dec = model.decoder_layers[0]
        for p_ in range(max_pos - 1):
            dec.cross_attn.q_proj.weight[vocab + p_ + 1, vocab + p_] = g
        for j in range(vocab, d):
            dec.cross_attn.k_proj.weight[j, j] = 1.0
        for i in range(vocab):
            dec.cross_attn.v_proj.weight[i, i] = 1.0
            dec.cross_attn.o_proj.weight[i, i] = h
            model.out_proj.weight[i, i] = 1.0
    return model
