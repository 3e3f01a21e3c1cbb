#pragma once

// Versioned text checkpoint. The first line is `format-version=<n>`; the
// run configuration follows in config-file syntax, then per-control MLP
// shapes and parameter arrays (`count v0 v1 ...`, 17 significant digits so
// every double reads back bit-exactly).

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "chowflow/config.hpp"
#include "chowflow/flow.hpp"

namespace chowflow::checkpoint {

inline constexpr int kFormatVersion = 1;

class FormatVersionError : public ParseError {
 public:
  using ParseError::ParseError;
};

struct Checkpoint {
  int format_version = kFormatVersion;
  config::RunConfig config;
  std::vector<nets::MlpSpec> specs;
  std::vector<std::vector<double>> params;
  std::optional<double> final_loss;

  flow::ControlledFlowModel model() const;
};

Checkpoint make_checkpoint(const flow::ControlledFlowModel& model, const config::RunConfig& cfg,
                           std::optional<double> final_loss = std::nullopt);

std::string to_text(const Checkpoint& ckpt);
Checkpoint from_text(const std::string& text);

void save(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load(const std::filesystem::path& path);

}  // namespace chowflow::checkpoint
