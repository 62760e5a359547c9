"""Time-guided latent diffusion generator over per-user interaction vectors."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .autodiff import NonFiniteError
from .time_codec import TimeEncoder


class NoiseSchedule:
    def __init__(self, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if betas.dim() != 1 or betas.numel() < 1:
            raise ValueError("betas must be a non-empty vector")
        if bool(((betas <= 0) | (betas >= 1)).any()):
            raise ValueError("every beta must lie in (0, 1)")
        self.betas = betas
        self.K = betas.numel()
        self.alphas = 1.0 - betas
        # index 0 holds alpha_bar_0 = 1
        self.alpha_bars = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(self.alphas, 0)])

    @classmethod
    def linear(cls, K: int = 5, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        if K == 1:
            return cls([beta_start])
        return cls(torch.linspace(beta_start, beta_end, K, dtype=torch.float64))

    def beta(self, k: int) -> float:
        return float(self.betas[k - 1])

    def alpha(self, k: int) -> float:
        return float(self.alphas[k - 1])

    def alpha_bar(self, k: int) -> float:
        return float(self.alpha_bars[k])

    def snr(self, k: int) -> float:
        ab = self.alpha_bar(k)
        return float("inf") if ab == 1.0 else ab / (1.0 - ab)

    def elbo_coefficient(self, k: int) -> float:
        """Weight of ||z_hat - z_0||^2 in the step-k bound.

        For k >= 2 this is (SNR(k-1) - SNR(k)) / 2. At k = 1 the prior step is
        noise-free and the difference is unbounded; the Gaussian decoder term
        with variance beta_1 is used instead, i.e. 1 / (2 * beta_1).
        """
        self._check(k)
        if k == 1:
            return 0.5 / self.beta(1)
        return 0.5 * (self.snr(k - 1) - self.snr(k))

    def elbo_coefficients(self) -> torch.Tensor:
        return torch.tensor([self.elbo_coefficient(k) for k in range(1, self.K + 1)], dtype=torch.float64)

    def posterior_coefficients(self, k: int) -> tuple[float, float, float]:
        """(coef on predicted z_0, coef on z_k, posterior variance) of q(z_{k-1} | z_k, z_0)."""
        self._check(k)
        ab, ab_prev, b = self.alpha_bar(k), self.alpha_bar(k - 1), self.beta(k)
        c0 = ab_prev ** 0.5 * b / (1 - ab)
        ck = self.alpha(k) ** 0.5 * (1 - ab_prev) / (1 - ab)
        var = b * (1 - ab_prev) / (1 - ab)
        return c0, ck, var

    def _check(self, k: int) -> None:
        if not 1 <= k <= self.K:
            raise ValueError(f"step k={k} outside [1, {self.K}]")


@dataclass
class DiffusionLoss:
    total: torch.Tensor
    elbo: torch.Tensor
    recon: torch.Tensor
    l1: torch.Tensor
    kl: torch.Tensor


def _mlp(n_in: int, hidden: int, n_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(n_in, hidden), nn.Tanh(), nn.Linear(hidden, n_out))


class DiffusionGenerator(nn.Module):
    """VAE encoder, conditioned denoiser and score decoder.

    The VAE compresses ``concat(a_row, h_s)`` into a latent of size ``d_z``;
    the denoiser predicts ``z_0`` from ``concat(z_k, c_t, step_embedding(k))``;
    the score decoder maps a latent back to one score per item.
    """

    def __init__(self, num_items: int, d_seq: int, d_z: int = 32, hidden: int = 64,
                 K: int = 5, time_dim: int = 16, step_dim: int = 8, schedule: NoiseSchedule | None = None):
        super().__init__()
        if d_z < 2:
            raise ValueError("d_z must be at least 2")
        self.num_items, self.d_seq, self.d_z = num_items, d_seq, d_z
        self.schedule = schedule or NoiseSchedule.linear(K)
        self.K = self.schedule.K
        self.time_codec = TimeEncoder(time_dim, learnable=True)
        self.step_embedding = nn.Embedding(self.K + 1, step_dim)
        self.vae_encoder = _mlp(num_items + d_seq, hidden, 2 * d_z)
        self.denoiser = _mlp(d_z + time_dim + step_dim, hidden, d_z)
        self.score_decoder = _mlp(d_z, hidden, num_items)
        nn.init.zeros_(self.score_decoder[-1].weight)
        nn.init.zeros_(self.score_decoder[-1].bias)

    def encode_latent(self, a_row: torch.Tensor, h_s: torch.Tensor, deterministic: bool = False,
                      generator: torch.Generator | None = None):
        if a_row.shape[-1] != self.num_items or h_s.shape[-1] != self.d_seq:
            raise ValueError(
                f"encode_latent: expected a_row[..., {self.num_items}] and h_s[..., {self.d_seq}], "
                f"got {tuple(a_row.shape)} and {tuple(h_s.shape)}"
            )
        stats = self.vae_encoder(torch.cat([a_row, h_s], dim=-1))
        mean, logvar = stats[..., : self.d_z], stats[..., self.d_z:]
        if deterministic:
            return mean, mean, logvar
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean + torch.exp(0.5 * logvar) * eps, mean, logvar

    def predict_z0(self, z_k: torch.Tensor, c_t: torch.Tensor, k) -> torch.Tensor:
        k = torch.as_tensor(k, dtype=torch.long).expand(z_k.shape[:-1])
        return self.denoiser(torch.cat([z_k, c_t, self.step_embedding(k)], dim=-1))

    def denoise_step(self, z_k: torch.Tensor, c_t: torch.Tensor, k: int, deterministic: bool = True,
                     generator: torch.Generator | None = None, z0_hat: torch.Tensor | None = None):
        """One reverse step. Returns (posterior mean, z_{k-1})."""
        c0, ck, var = self.schedule.posterior_coefficients(k)
        if z0_hat is None:
            z0_hat = self.predict_z0(z_k, c_t, k)
        mu = c0 * z0_hat + ck * z_k
        if deterministic or var == 0.0:
            return mu, mu
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        return mu, mu + var ** 0.5 * eps

    def scores(self, z: torch.Tensor) -> torch.Tensor:
        return self.score_decoder(z)


def diffuse_forward(z_0: torch.Tensor, k, schedule: NoiseSchedule, eps: torch.Tensor | None = None,
                    generator: torch.Generator | None = None) -> torch.Tensor:
    ks = torch.as_tensor(k, dtype=torch.long)
    if bool((ks < 1).any()) or bool((ks > schedule.K).any()):
        raise ValueError(f"step k outside [1, {schedule.K}]")
    if eps is None:
        eps = torch.randn(z_0.shape, generator=generator, dtype=z_0.dtype)
    ab = schedule.alpha_bars.to(z_0.dtype)[ks]
    if ab.dim():
        ab = ab.unsqueeze(-1)
    return ab.sqrt() * z_0 + (1 - ab).sqrt() * eps


def kl_to_standard_normal(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    return -0.5 * (1 + logvar - mean.pow(2) - logvar.exp()).sum(-1)


def diffusion_loss(gen: DiffusionGenerator, a_row: torch.Tensor, h_s: torch.Tensor, c_t: torch.Tensor,
                   target: torch.Tensor | None, generator: torch.Generator | None = None,
                   lambda_reg: float = 1e-4, lambda_vae: float = 1e-3, lambda_recon: float = 1.0,
                   normalize_elbo: bool = True, k: torch.Tensor | None = None,
                   eps: torch.Tensor | None = None, z0_eps: torch.Tensor | None = None,
                   denoiser=None) -> DiffusionLoss:
    """Batch-mean generator loss.

    Per example: sample k ~ U{1..K}, corrupt the VAE latent, weight the
    predicted-z_0 error by the step's bound coefficient, then add an L1 penalty
    on decoded item scores, the VAE KL term and a softmax cross-entropy between
    decoded scores and ``target`` (item indices interacted at time t; skipped
    when ``target`` is None).

    ``normalize_elbo`` divides all step coefficients by their mean so the bound
    term keeps its relative step weighting on an O(1) scale.
    ``k``, ``eps``, ``z0_eps`` and ``denoiser`` exist for tests that pin the noise
    or substitute an oracle denoiser.
    """
    B = a_row.shape[0]
    if B == 0:
        raise ValueError("diffusion_loss: empty batch")
    schedule = gen.schedule
    if k is None:
        k = torch.randint(1, schedule.K + 1, (B,), generator=generator)
    if z0_eps is None:
        z_0, mean, logvar = gen.encode_latent(a_row, h_s, generator=generator)
    else:
        _, mean, logvar = gen.encode_latent(a_row, h_s, deterministic=True)
        z_0 = mean + torch.exp(0.5 * logvar) * z0_eps
    z_k = diffuse_forward(z_0, k, schedule, eps=eps, generator=generator)
    z0_hat = gen.predict_z0(z_k, c_t, k) if denoiser is None else denoiser(z_k, c_t, k, z_0)

    coef = schedule.elbo_coefficients()
    if normalize_elbo:
        coef = coef / coef.mean()
    w = coef.to(z_0.dtype)[k - 1]
    elbo = w * ((z0_hat - z_0) ** 2).sum(-1)
    scores = gen.scores(z0_hat)
    l1 = scores.abs().sum(-1)
    kl = kl_to_standard_normal(mean, logvar)
    if target is not None and lambda_recon:
        recon = -torch.log_softmax(scores, -1).gather(-1, target.view(-1, 1)).squeeze(-1)
    else:
        recon = torch.zeros_like(l1)
    total = (elbo + lambda_reg * l1 + lambda_vae * kl + lambda_recon * recon).mean()
    if not bool(torch.isfinite(total)):
        raise NonFiniteError(
            "non-finite diffusion loss",
            {name: int((~torch.isfinite(v)).sum()) for name, v in
             (("elbo", elbo), ("l1", l1), ("kl", kl), ("recon", recon))},
        )
    return DiffusionLoss(total, elbo.mean(), recon.mean(), l1.mean(), kl.mean())
