#pragma once

// Run configuration as flat `key=value` text. `#` starts a comment; blank
// lines are ignored; unknown keys are errors.

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "chowflow/control_net.hpp"
#include "chowflow/fields.hpp"
#include "chowflow/train.hpp"

namespace chowflow::config {

/// Which fixed fields drive the flow.
///   chain          - chain field plus d/dx_2 .. d/dx_k
///   permuted-chain - the same along `permutation` (1-based, length d)
///   coordinate     - d/dx_1 .. d/dx_k
///   heisenberg     - the Heisenberg pair (d = 3, k = 2)
struct FieldSetSpec {
  std::string kind = "chain";
  std::vector<std::size_t> permutation;

  /// Throws ContractError if the spec is inconsistent with (d, k).
  void validate(std::size_t d, std::size_t k) const;
  fields::FieldSet build(std::size_t d, std::size_t k) const;
  /// Fields without the 2 <= k restriction, for bracket certification.
  std::vector<fields::FixedField> build_fields(std::size_t d, std::size_t k) const;
};

struct RunConfig {
  train::TrainConfig train;
  FieldSetSpec field_set;
  std::size_t d = 3;
  std::size_t k = 2;
  std::vector<std::size_t> hidden{nets::kDefaultWidth, nets::kDefaultWidth, nets::kDefaultWidth};
  std::string data_path;        ///< CSV to train on; empty means generate `train.dataset`
  std::size_t n_data = 20000;   ///< size of a generated training set
  double mixture_sd = 0.6;
  std::string out_dir = ".";

  void validate() const;
  nets::MlpSpec mlp_spec() const { return nets::MlpSpec{d + 1, hidden}; }
};

using Entry = std::pair<std::string, std::string>;

/// Sets one key; throws ParseError for unknown keys or malformed values.
void apply_entry(RunConfig& cfg, const std::string& key, const std::string& value);
/// Every key with its current value, in a fixed order.
std::vector<Entry> entries(const RunConfig& cfg);

/// Splits `key=value` lines; throws ParseError with the line number.
std::vector<Entry> parse_key_values(const std::string& text);

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string to_text(const RunConfig& cfg);

std::vector<std::size_t> parse_size_list(const std::string& value);
std::string format_size_list(const std::vector<std::size_t>& values);

}  // namespace chowflow::config
