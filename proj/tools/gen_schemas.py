#!/usr/bin/env python3
"""Regenerates schemas/ (JSON Schema 2020-12) for artifacts and API payloads."""
import json, os
D = "https://json-schema.org/draft/2020-12/schema"
ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "schemas")
def obj(props, required=None, extra=False):
    o = {"type": "object", "properties": props, "required": list(props) if required is None else required}
    if not extra: o["additionalProperties"] = False
    return o
I = {"type": "integer"}; N = {"type": "number"}; S = {"type": "string"}; B = {"type": "boolean"}
NN = {"type": "integer", "minimum": 0}; NNum = {"type": "number", "minimum": 0}
def nullable(t): return {"anyOf": [t, {"type": "null"}]}
def arr(t, **kw): return {"type": "array", "items": t, **kw}
def const(v): return {"const": v}
def urn(kind, name): return f"urn:patchsae:schema:{kind}:{name}:v1"
def write(kind, name, title, schema):
    schema = {"$schema": D, "$id": urn(kind, name), "title": title, **schema}
    with open(f"{ROOT}/{kind}/{name}.v1.schema.json", "w") as f:
        json.dump(schema, f, indent=2); f.write("\n")

def payload(name, props):
    return obj({"schema": const(f"{name}/v1"), "status": const("ok"), **props})
def endpoint(name, title, props):
    write("api", name, title, {"anyOf": [payload(name, props), {"$ref": urn("api", "not_computed")}, {"$ref": urn("api", "error")}]})

write("api", "error", "Error payload (4xx)", obj({"schema": const("error/v1"), "status": const("error"),
      "code": {"type": "integer", "minimum": 400, "maximum": 599}, "message": S}))
write("api", "not_computed", "Missing optional artifact", obj({"schema": const("not_computed/v1"),
      "status": const("not_computed"), "artifact": S, "message": S}))
latent_value = obj({"latent_id": NN, "value": NNum})
endpoint("backbones", "GET /api/backbones", {
    "backbones": arr(obj({"backbone_id": S, "n_images": NN, "has_activations": B, "has_stats": B,
        "hook_layer": nullable({"type": "integer", "minimum": 1}), "d_vit": nullable(NN), "tokens_per_image": nullable(NN),
        "grid_h": nullable(NN), "grid_w": nullable(NN)})),
    "sae": nullable(obj({"d_vit": NN, "d_sae": NN, "content_hash": S, "trained_on": S}))})
split_enum = {"enum": ["train", "base_test", "novel_test", "other"]}
endpoint("images", "GET /api/images", {
    "dataset": nullable(S), "split": nullable(split_enum),
    "images": arr(obj({"image_id": S, "label_id": {"type": "integer", "minimum": -1}, "label_name": S, "dataset_name": S,
        "split": split_enum, "backbones": arr(S), "thumbnail": nullable(S)}))})
endpoint("image_latents", "GET /api/image/{id}/latents", {
    "image_id": S, "backbone_id": S, "label_id": {"type": "integer", "minimum": -1},
    "image_level": arr(latent_value),
    "patch": nullable(obj({"token": S, "row": nullable(NN), "col": nullable(NN), "latents": arr(latent_value)}))})
endpoint("latents_compare", "GET /api/latents/compare", {
    "image_id": S, "a": S, "b": S, "top_n": NN,
    "common": arr(obj({"latent_id": NN, "value_a": NNum, "value_b": NNum})),
    "only_a": arr(latent_value), "only_b": arr(latent_value)})
grid = arr(arr(NNum))
ref = obj({"image_id": S, "mean_activation": NNum, "label_id": {"type": "integer", "minimum": -1}})
refimg = obj({"image_id": S, "mean_activation": NNum, "label_id": {"type": "integer", "minimum": -1},
              "thumbnail": nullable(S), "mask": nullable(grid)}, required=["image_id", "mean_activation", "label_id", "thumbnail"])
endpoint("refimages", "GET /api/latent/{s}/refimages", {
    "latent_id": NN, "backbone_id": S, "masked": B, "reference_images": arr(refimg)})
endpoint("mask", "GET /api/latent/{s}/mask/{image}?format=json", {
    "backbone_id": S, "latent_id": NN, "image_id": S, "grid_h": NN, "grid_w": NN, "cls_value": NNum,
    "patch_values": grid, "normalized_values": arr(arr({"type": "number", "minimum": 0, "maximum": 1}))})
endpoint("latent_stats", "GET /api/latent/{s}/stats", {
    "latent_id": NN, "backbone_id": S, "n_images": NN, "frequency": {"type": "number", "minimum": 0, "maximum": 1},
    "mean_activation": NNum, "label_entropy": NNum, "entropy_log_base": const("e"), "label_std": NNum,
    "image_count": NN, "positive_token_count": NN, "reference_images": arr(ref)})
endpoint("compare_report", "GET /api/compare/report", {"report": {"$ref": urn("artifacts", "comparison_report")}})

# ---- artifacts
record = obj({"image_id": {"type": "string", "minLength": 1}, "path_or_uri": S, "label_id": {"type": "integer", "minimum": -1},
              "label_name": S, "dataset_name": S, "split": split_enum})
write("artifacts", "image_list", "Image list (extract --images)", arr(record))
write("artifacts", "shard_manifest", "Activation shard manifest.json", obj({
    "format_version": const(1), "backbone_id": S, "hook_layer": {"type": "integer", "minimum": 1},
    "tokens_per_image": {"type": "integer", "minimum": 2}, "d_vit": {"type": "integer", "minimum": 1},
    "embed_dim": {"type": "integer", "minimum": 1}, "grid_h": {"type": "integer", "minimum": 1},
    "grid_w": {"type": "integer", "minimum": 1}, "n_blocks": {"type": "integer", "minimum": 1},
    "extra_tokens_per_image": NN, "token_order": const("cls_first_then_patches_row_major"), "records": arr(record)}))
sae_config = obj({"d_vit": {"type": "integer", "minimum": 1}, "expansion_factor": {"type": "integer", "minimum": 1},
    "d_sae": {"type": "integer", "minimum": 1}, "l1_coefficient": NNum, "learning_rate": {"type": "number", "exclusiveMinimum": 0},
    "warmup_steps": NN, "training_images": {"type": "integer", "minimum": 1}, "batch_size_tokens": {"type": "integer", "minimum": 1},
    "ghost_gradients": B, "dead_latent_window": {"type": "integer", "minimum": 1},
    "decoder_bias_init": {"enum": ["geometric_median", "mean"]}, "normalize_decoder": B, "seed": NN,
    "bias_init_samples": {"type": "integer", "minimum": 1}, "log_every": {"type": "integer", "minimum": 1},
    "optimizer": {"type": "object"}}, required=["d_vit", "expansion_factor", "d_sae", "l1_coefficient", "learning_rate",
    "warmup_steps", "training_images", "batch_size_tokens", "ghost_gradients", "dead_latent_window", "decoder_bias_init",
    "normalize_decoder", "seed"])
write("artifacts", "sae_checkpoint", "SAE checkpoint sae.json", obj({"format_version": const(1), "config": sae_config,
    "metadata": obj({"created_at": S, "content_hash": {"type": "string", "pattern": "^[0-9a-f]{40}$"}}, extra=True)}))
write("artifacts", "train_report", "train_report.json", obj({"steps": NN, "final_mse": NNum, "final_l1": NNum,
    "final_l0": NNum, "dead_latent_count": NN, "loss_curve": arr({"type": "array", "prefixItems": [NN, NNum, NNum], "minItems": 3, "maxItems": 3})}))
write("artifacts", "latent_stats", "latent_stats.json", obj({"format_version": const(1), "backbone_id": S, "n_images": NN,
    "k": {"type": "integer", "minimum": 1}, "entropy_log_base": const("e"), "frequency_unit": const("images"),
    "dead_latents": NN, "sae_hash": S,
    "latents": arr(obj({"latent_id": NN, "frequency": {"type": "number", "minimum": 0, "maximum": 1}, "mean_activation": NNum,
        "label_entropy": NNum, "label_std": NNum, "image_count": NN, "positive_token_count": NN}))},
    required=["format_version", "backbone_id", "n_images", "k", "entropy_log_base", "latents"]))
write("artifacts", "refimgs", "refimgs.json (latent id -> [image_id, mean_activation, label_id])", {"type": "object",
    "propertyNames": {"pattern": "^[0-9]+$"},
    "additionalProperties": arr({"type": "array", "prefixItems": [S, NNum, {"type": "integer", "minimum": -1}], "minItems": 3, "maxItems": 3})})
write("artifacts", "counts", "counts_<level>.json (entity -> {latent id: count})", {"type": "object",
    "additionalProperties": {"type": "object", "propertyNames": {"pattern": "^[0-9]+$"},
                             "additionalProperties": {"type": "integer", "minimum": 1}}})
write("artifacts", "counts_meta", "counts_<level>.meta.json", obj({"format_version": const(1), "backbone_id": S,
    "level": {"enum": ["image", "class", "dataset"]}, "tau": {"type": "number", "exclusiveMinimum": 0}, "include_cls": B,
    "sae_hash": S, "entities": NN}))
mask_summary = obj({"mode": {"enum": ["on_topk", "off_topk", "on_random", "off_random", "on_dataset_topk", "off_dataset_topk", "identity", "zero"]},
    "k": NN, "selection_source": {"enum": ["class_level", "dataset_level", "random"]}, "selection_backbone_id": S, "seed": NN,
    "d_sae": {"type": "integer", "minimum": 1},
    "selected_latents": {"type": "object", "propertyNames": {"pattern": "^[0-9]+$"}, "additionalProperties": arr(NN)}})
write("artifacts", "eval_report", "eval-mask report", obj({"format_version": const(1), "dataset": S,
    "split": {"enum": ["base", "novel", "full"]}, "backbone_id": S, "class_ids": arr(NN),
    "accuracy": {"type": "number", "minimum": 0, "maximum": 100},
    "per_class_accuracy": arr({"type": "number", "minimum": 0, "maximum": 100}),
    "confusion_matrix": arr(arr(NN)), "evaluated": NN, "reconstruction_flag": {"enum": ["substituted", "native"]},
    "error_term": {"enum": ["none", "add_residual"]}, "mask_application": {"enum": ["ground_truth", "per_candidate"]},
    "mask": nullable(mask_summary), "sae_hash": S}, required=["format_version", "dataset", "split", "backbone_id", "class_ids",
    "accuracy", "per_class_accuracy", "confusion_matrix", "evaluated", "reconstruction_flag", "error_term", "mask_application", "mask"]))
counts4 = obj({"high": NN, "high_to_low": NN, "low_to_high": NN, "neither": NN})
bounds = obj({"upper_rank": {"type": "integer", "minimum": 1}, "lower_rank": {"type": "integer", "minimum": 2},
    "mode": {"enum": ["per_axis", "union"]}, "upper_x": NNum, "lower_x": NNum, "upper_y": NNum, "lower_y": NNum,
    "clamped_x": B, "clamped_y": B})
r = nullable({"type": "number", "minimum": -1, "maximum": 1})
write("artifacts", "comparison_report", "comparison_report.json", obj({"format_version": const(1), "dataset": S,
    "backbone_a": S, "backbone_b": S, "level": {"enum": ["class", "dataset"]}, "tau": {"type": "number", "exclusiveMinimum": 0},
    "include_cls": B, "upper_rank": {"type": "integer", "minimum": 1}, "lower_rank": {"type": "integer", "minimum": 2},
    "bound_mode": {"enum": ["per_axis", "union"]}, "n_classes": {"type": "integer", "minimum": 1}, "n_images": NN, "sae_hash": S,
    "splits": arr(obj({"split": {"enum": ["base", "novel", "full"]},
        "entities": arr(obj({"entity_id": S, "bounds": bounds, "counts": counts4, "active_latents": NN, "pearson_r": r})),
        "skipped": arr(S), "average": obj({"high": NNum, "high_to_low": NNum, "low_to_high": NNum}), "pearson_r": r,
        "zero_shot_accuracy": nullable(N), "adapted_accuracy": nullable(N), "delta": nullable(N)}))},
    required=["format_version", "dataset", "backbone_a", "backbone_b", "level", "tau", "include_cls", "upper_rank",
              "lower_rank", "bound_mode", "n_classes", "n_images", "splits"]))
write("artifacts", "class_embeddings", "class_embeddings.json", obj({"format_version": const(1), "dataset_name": S,
    "class_names": arr(S), "provenance": S, "classes": {"type": "integer", "minimum": 2}, "embed_dim": {"type": "integer", "minimum": 1}}))
hashes = {"type": "object", "additionalProperties": {"type": "string", "pattern": "^[0-9a-f]{40}$"}}
write("artifacts", "run_record", "runs/<timestamp>.json", obj({"format_version": const(1), "command": {"enum": ["extract",
    "train", "stats", "concepts", "mask", "eval-mask", "compare", "serve", "export-demo"]}, "argv": arr(S), "config": S, "cwd": S,
    "started_at": S, "seeds": {"type": "object"}, "inputs": hashes, "outputs": hashes,
    "status": {"enum": ["ok", "error", "serving"]}, "exit_code": {"enum": [0, 1]}, "error": S, "wall_time_s": NNum,
    "failures": arr(obj({"image_id": S, "message": S})), "gaps": arr(obj({"section": S, "reason": S}))},
    required=["format_version", "command", "argv", "config", "started_at", "seeds", "inputs", "outputs", "status"]))
write("artifacts", "registry_entry", "One line of registry.jsonl", obj({"kind": {"enum": ["shard", "checkpoint", "stats",
    "counts", "eval_report", "comparison", "export"]}, "path": {"type": "string", "minLength": 1},
    "hash": {"type": "string", "pattern": "^[0-9a-f]{40}$"}, "registered_at": S, "meta": {"type": "object"}}))
write("artifacts", "export_manifest", "export_manifest.json of a static bundle", obj({"format_version": const(1),
    "created_at": S, "files": arr(obj({"target": {"type": "string", "pattern": "^/api/"}, "file": S,
        "status": {"type": "integer"}, "content_type": {"enum": ["application/json", "image/png", "image/jpeg"]}})),
    "gaps": arr(obj({"section": S, "reason": S}))}))
