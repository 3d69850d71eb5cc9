import torch


def max_rel_grad_error(named_params, loss_fn, eps=1e-5, floor=1e-3, stride_for=None, skip_rows=()):
    """Worst relative disagreement between autograd and central differences.

    ``floor`` turns the comparison absolute for components whose gradient
    magnitude is below it, keeping float roundoff in the finite differences
    from masquerading as gradient error. ``stride_for(name, numel)`` may
    subsample large tensors; ``skip_rows`` lists parameter names whose first
    row is pinned (embedding padding rows) and excluded.
    """
    params = list(named_params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    worst = 0.0
    for (name, param), grad in zip(params, grads):
        if grad is None:
            continue
        flat = param.data.view(-1)
        gflat = grad.reshape(-1)
        start = param.shape[-1] if name in skip_rows else 0
        stride = stride_for(name, flat.numel()) if stride_for else 1
        for idx in range(start, flat.numel(), stride):
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = float(loss_fn())
                flat[idx] = orig - eps
                down = float(loss_fn())
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = gflat[idx].item()
            rel = abs(an - fd) / max(abs(an) + abs(fd), floor)
            worst = max(worst, rel)
    return worst
