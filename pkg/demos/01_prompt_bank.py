# %% A prompt bank is K learnable (tokens x dim) matrices; its per-entry
# mean and spread define a Gaussian we sample conditioning prompts from.
import torch

from promptstyle.bank import bank_stats, init_prompt_bank, mean_pairwise_abs_cos, omega_stream, ortho_loss, sample_prompt

bank = init_prompt_bank(K=8, tokens=4, embed_dim=16, seed=0)
stats = bank_stats(bank)
print("bank", tuple(bank.prompts.shape), "mu", tuple(stats.mu.shape), "sigma mean", stats.sigma.mean().item())

# %% gamma scales the spread; gamma=0 always gives the mean prompt
omega = omega_stream(seed=0, index=0, shape=bank.prompt_shape)
for gamma in (0.0, 1.0, 3.0):
    c = sample_prompt(stats, omega, gamma)
    print(f"gamma={gamma}: distance from mu {torch.linalg.norm(c - stats.mu):.4f}")

# %% the orthogonality penalty: 0.5 for a collapsed bank, smaller when prompts point apart
collapsed = bank.prompts.detach()[:1].expand(8, -1, -1)
print("collapsed bank ortho", ortho_loss(collapsed).item())
print("random bank ortho   ", ortho_loss(bank.prompts.detach()).item())
print("mean pairwise |cos| ", mean_pairwise_abs_cos(bank))
