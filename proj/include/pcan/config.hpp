#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "pcan/dataset.hpp"
#include "pcan/loss.hpp"
#include "pcan/model.hpp"
#include "pcan/train.hpp"

namespace pcan {

// Every tunable in one place. Files use `key = value` lines under [section]
// headers; `#` starts a comment. Unknown sections or keys are rejected so a
// typo cannot silently fall back to a default.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  MiningConfig mining;
  LossConfig loss;
  SynthConfig synth;
  std::size_t eval_max_n = 25;

  void validate() const;
};

std::string attention_mode_name(AttentionMode mode);
AttentionMode attention_mode_from(const std::string& name);

RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::filesystem::path& path);

// "section.key=value" form used by command-line overrides.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Fully resolved dump; parse_config_text(dump_config(c)) reproduces c exactly
// (doubles are printed round-trip precise).
std::string dump_config(const RunConfig& cfg);

}  // namespace pcan
