"""Checkpoint container, parameter hashing and freezing."""

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import torch
from torch import nn

from priorfill.errors import CheckpointError, FrozenParameterError

CHECKPOINT_FORMAT = 1


def parameter_hash(source: nn.Module | dict[str, torch.Tensor]) -> str:
    """sha256 over every named tensor (parameters and buffers) in sorted name order."""
    state = source.state_dict() if isinstance(source, nn.Module) else source
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes() if tensor.numel() else b"")
    return digest.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    """Put a module in eval mode with gradients disabled."""
    module.eval()
    for param in module.parameters():
        param.requires_grad_(False)
    return module


def assert_no_grad(module: nn.Module, name: str) -> None:
    """Raise if any parameter of a frozen module has accumulated a gradient."""
    for param_name, param in module.named_parameters():
        if param.requires_grad or (param.grad is not None and bool(param.grad.abs().sum() > 0)):
            raise FrozenParameterError(f"Frozen module '{name}' parameter '{param_name}' received a gradient")


@dataclass
class Checkpoint:
    """A trained module: config echo, named parameter arrays, step and content hash."""

    module_id: str
    config: dict[str, Any]
    state: dict[str, torch.Tensor]
    step: int
    profile: str = "desk"
    content_hash: str = ""
    extra: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_module(
        cls,
        module_id: str,
        module: nn.Module,
        config: dict[str, Any],
        step: int,
        profile: str = "desk",
        extra: Optional[dict[str, Any]] = None,
    ) -> "Checkpoint":
        state = {name: tensor.detach().cpu().clone() for name, tensor in module.state_dict().items()}
        return cls(
            module_id=module_id,
            config=config,
            state=state,
            step=step,
            profile=profile,
            content_hash=parameter_hash(state),
            extra=extra or {},
        )

    def save(self, path: Path) -> Path:
        """Write the checkpoint; failures carry the path."""
        payload = {
            "format": CHECKPOINT_FORMAT,
            "module_id": self.module_id,
            "config": self.config,
            "state": self.state,
            "step": self.step,
            "profile": self.profile,
            "content_hash": self.content_hash or parameter_hash(self.state),
            "extra": self.extra,
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(payload, path)
        except OSError as e:
            raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path: Path, module_id: Optional[str] = None, profile: Optional[str] = None) -> "Checkpoint":
        """
        Read and verify a checkpoint.

        Args:
            path: Checkpoint file
            module_id: Expected module id, if the caller knows it
            profile: Expected resolution profile, if the caller knows it

        Raises:
            CheckpointError: On I/O failure, hash mismatch, or module / profile mismatch
        """
        if not path.exists():
            raise CheckpointError(f"Checkpoint not found: {path}")
        try:
            payload = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as e:
            raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e

        checkpoint = cls(
            module_id=payload["module_id"],
            config=payload["config"],
            state=payload["state"],
            step=payload["step"],
            profile=payload.get("profile", "desk"),
            content_hash=payload["content_hash"],
            extra=payload.get("extra", {}),
        )
        actual = parameter_hash(checkpoint.state)
        if actual != checkpoint.content_hash:
            raise CheckpointError(
                f"Checkpoint {path} failed verification: stored hash {checkpoint.content_hash[:12]}, "
                f"actual {actual[:12]}"
            )
        if module_id is not None and checkpoint.module_id != module_id:
            raise CheckpointError(f"Checkpoint {path} holds '{checkpoint.module_id}', expected '{module_id}'")
        if profile is not None and checkpoint.profile != profile:
            raise CheckpointError(
                f"Checkpoint {path} was trained at profile '{checkpoint.profile}', this run uses '{profile}'"
            )
        return checkpoint

    def load_into(self, module: nn.Module) -> nn.Module:
        try:
            module.load_state_dict(self.state)
        except RuntimeError as e:
            raise CheckpointError(f"Checkpoint '{self.module_id}' does not match the module: {e}") from e
        return module
