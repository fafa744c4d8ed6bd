"""LoRA-adapted promptable segmentation with dual mask decoders, alternating
optimization, prompt-centered tiled inference, and boundary-aware metrics."""

from .config import InferenceConfig, ModelConfig, RunConfig, TrainConfig
from .maskgrid import MaskGrid
from .model import BoxPrompt, EncoderOutput, ModelState, build_model, \
    encode_box_prompt, encoder_forward
from .lora import LoraPair, adapter_parameters, inject_lora, lora_forward, \
    merge_lora, merge_lora_into_model
from .decoder import DecoderOutput, binarize, decode, upsample_logits
from .data import AnnotationRecord, TrainingSample, fit_to_canvas, \
    large_scale_jitter, load_dataset, normalize_image, random_rotate, \
    rotate_sample, tight_bbox
from .training import Checkpoint, bce_dice_loss, load_checkpoint, \
    save_checkpoint, set_trainability, state_from_checkpoint, train, training_step
from .infer import CropWindow, extract_and_upsample, merge_instance_masks, \
    plan_crops, restore_mask, segment_objects
from .metrics import EvalReport, biou, boundary_region, evaluate, iou

__all__ = [
    "InferenceConfig", "ModelConfig", "RunConfig", "TrainConfig", "MaskGrid",
    "BoxPrompt", "EncoderOutput", "ModelState", "build_model",
    "encode_box_prompt", "encoder_forward", "LoraPair", "adapter_parameters",
    "inject_lora", "lora_forward", "merge_lora", "merge_lora_into_model",
    "DecoderOutput", "binarize", "decode", "upsample_logits",
    "AnnotationRecord", "TrainingSample", "fit_to_canvas", "large_scale_jitter",
    "load_dataset", "normalize_image", "random_rotate", "rotate_sample",
    "tight_bbox", "Checkpoint", "bce_dice_loss", "load_checkpoint",
    "save_checkpoint", "set_trainability", "state_from_checkpoint", "train",
    "training_step", "CropWindow", "extract_and_upsample",
    "merge_instance_masks", "plan_crops", "restore_mask", "segment_objects",
    "EvalReport", "biou", "boundary_region", "evaluate", "iou",
]
