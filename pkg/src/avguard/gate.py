"""A filter in front of the voice control system: pass a recognized command only if the camera view agrees."""

import logging
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InputError
from .evaluation import predict_logits
from .labels import COMMANDS, Target
from .models import FusionNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GateDecision:
    command: Target
    predicted: Target
    confidence: float

    @property
    def accepted(self) -> bool:
        return self.predicted is self.command

    @property
    def reason(self) -> str:
        if self.accepted:
            return "consistent"
        if self.predicted is Target.ANOMALY:
            return "anomaly"
        return f"contradicted by {self.predicted.word}"


class CommandGate:
    """
    Wraps a trained fusion model.

    A command is accepted when the model predicts exactly that command for
    the (image, audio) pair; a predicted anomaly or a different command
    filters it out.
    """

    def __init__(self, model: FusionNet) -> None:
        self.model = model.eval()

    def decide(self, image: np.ndarray, features: np.ndarray, command: Target | str) -> GateDecision:
        if isinstance(command, str):
            command = Target.from_word(command)
        if command not in COMMANDS:
            raise InputError(f"{command.word!r} is not a voice command")

        dtype = next(self.model.parameters()).dtype
        images = torch.as_tensor(np.asarray(image)[None], dtype=dtype)
        audio = torch.as_tensor(np.asarray(features)[None], dtype=dtype)
        probabilities = torch.softmax(predict_logits(self.model, images, audio), dim=1)[0]
        predicted = Target(int(probabilities.argmax()))

        decision = GateDecision(command=command, predicted=predicted, confidence=float(probabilities[predicted]))
        if not decision.accepted:
            log.warning("Filtered voice command %r: %s (p=%.3f)", command.word, decision.reason, decision.confidence)
        return decision
