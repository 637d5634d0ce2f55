// SPDX-License-Identifier: Apache-2.0
//
// Run configuration snapshot stored inside checkpoints, as JSON.

#pragma once

#include <nlohmann/json.hpp>

#include <string>

#include "ssmamba/backbone.hpp"
#include "ssmamba/dataset.hpp"
#include "ssmamba/mamim.hpp"
#include "ssmamba/mil.hpp"
#include "ssmamba/training.hpp"

namespace ssm {

struct RunConfig {
  std::string preset = "desk";
  EncoderConfig encoder = presets::desk();
  DecoderConfig decoder;
  MILConfig mil;
  TrainConfig train;
  std::size_t image_size = 32;
  double mask_ratio = 0.75;
  std::vector<std::string> class_names;
  ChannelStats stats;  // train-split normalisation, stored so checkpoints are self-contained
};

inline json to_json(const EncoderConfig& c) {
  return {{"in_channels", c.in_channels},
          {"patch", c.patch},
          {"dims", c.dims},
          {"depths", c.depths},
          {"state_dim", c.state_dim},
          {"kernel", c.kernel},
          {"num_classes", c.num_classes},
          {"order", c.order == TokenOrder::raster ? "raster" : "column"},
          {"lpr_ghost", c.lpr_ghost},
          {"zero_init_dms_out", c.zero_init_dms_out},
          {"zero_init_head", c.zero_init_head}};
}

inline EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.patch = j.at("patch").get<std::size_t>();
  c.dims = j.at("dims").get<std::array<std::size_t, 4>>();
  c.depths = j.at("depths").get<std::array<std::size_t, 4>>();
  c.state_dim = j.at("state_dim").get<std::size_t>();
  c.kernel = j.at("kernel").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.order = j.at("order").get<std::string>() == "column" ? TokenOrder::column : TokenOrder::raster;
  c.lpr_ghost = j.at("lpr_ghost").get<bool>();
  c.zero_init_dms_out = j.at("zero_init_dms_out").get<bool>();
  c.zero_init_head = j.at("zero_init_head").get<bool>();
  return c;
}

inline json to_json(const DecoderConfig& d) {
  return {{"dim", d.dim}, {"depth", d.depth}, {"state_dim", d.state_dim}, {"kernel", d.kernel},
          {"zero_init_head", d.zero_init_head}};
}

inline DecoderConfig decoder_from_json(const json& j) {
  DecoderConfig d;
  d.dim = j.at("dim").get<std::size_t>();
  d.depth = j.at("depth").get<std::size_t>();
  d.state_dim = j.at("state_dim").get<std::size_t>();
  d.kernel = j.at("kernel").get<std::size_t>();
  d.zero_init_head = j.at("zero_init_head").get<bool>();
  return d;
}

inline json to_json(const TrainConfig& t) {
  return {{"phase", phase_name(t.phase)},   {"base_lr", t.base_lr},
          {"min_lr", t.min_lr},             {"weight_decay", t.weight_decay},
          {"batch_size", t.batch_size},     {"epochs", t.epochs},
          {"warmup_epochs", t.warmup_epochs}, {"mixup_alpha", t.mixup_alpha},
          {"clip_norm", t.clip_norm},       {"random_crop", t.random_crop},
          {"crop_min_scale", t.crop_min_scale}, {"seed", t.seed}};
}

inline TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.phase = parse_phase(j.at("phase").get<std::string>());
  t.base_lr = j.at("base_lr").get<double>();
  t.min_lr = j.at("min_lr").get<double>();
  t.weight_decay = j.at("weight_decay").get<double>();
  t.batch_size = j.at("batch_size").get<std::size_t>();
  t.epochs = j.at("epochs").get<std::size_t>();
  t.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
  t.mixup_alpha = j.at("mixup_alpha").get<double>();
  t.clip_norm = j.at("clip_norm").get<double>();
  t.random_crop = j.at("random_crop").get<bool>();
  t.crop_min_scale = j.at("crop_min_scale").get<double>();
  t.seed = j.at("seed").get<std::uint64_t>();
  return t;
}

inline json to_json(const RunConfig& r) {
  return {{"preset", r.preset},           {"encoder", to_json(r.encoder)}, {"decoder", to_json(r.decoder)},
          {"mil", to_json(r.mil)},         {"train", to_json(r.train)},     {"image_size", r.image_size},
          {"mask_ratio", r.mask_ratio},    {"class_names", r.class_names},
          {"norm", {{"mean", r.stats.mean}, {"std", r.stats.std}}}};
}

inline RunConfig run_config_from_json(const json& j) {
  RunConfig r;
  r.preset = j.at("preset").get<std::string>();
  r.encoder = encoder_from_json(j.at("encoder"));
  r.decoder = decoder_from_json(j.at("decoder"));
  r.mil = mil_from_json(j.at("mil"));
  r.train = train_from_json(j.at("train"));
  r.image_size = j.at("image_size").get<std::size_t>();
  r.mask_ratio = j.at("mask_ratio").get<double>();
  r.class_names = j.at("class_names").get<std::vector<std::string>>();
  r.stats.mean = j.at("norm").at("mean").get<std::array<double, 3>>();
  r.stats.std = j.at("norm").at("std").get<std::array<double, 3>>();
  return r;
}

inline std::string dump_config(const RunConfig& r) { return to_json(r).dump(2); }

inline RunConfig parse_config(const std::string& text) {
  try {
    return run_config_from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("malformed config snapshot: ") + e.what());
  }
}

}  // namespace ssm
