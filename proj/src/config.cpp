#include "chowflow/config.hpp"

#include <charconv>
#include <sstream>

#include "chowflow/errors.hpp"
#include "chowflow/io.hpp"

namespace chowflow::config {

namespace {

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
  if (value.empty() || res.ec != std::errc() || res.ptr != value.data() + value.size()) {
    throw ParseError("key '" + key + "': expected a non-negative integer, got '" + value + "'");
  }
  return v;
}

std::size_t parse_size(const std::string& key, const std::string& value) {
  return static_cast<std::size_t>(parse_u64(key, value));
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    return io::parse_double(value);
  } catch (const ParseError&) {
    throw ParseError("key '" + key + "': expected a number, got '" + value + "'");
  }
}

}  // namespace

std::vector<std::size_t> parse_size_list(const std::string& value) {
  std::vector<std::size_t> out;
  const std::string trimmed = io::trim(value);
  if (trimmed.empty()) return out;
  std::stringstream ss(trimmed);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_size("list", io::trim(item)));
  return out;
}

std::string format_size_list(const std::vector<std::size_t>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

void FieldSetSpec::validate(std::size_t d, std::size_t k) const {
  if (kind == "chain") {
    if (d < 3) throw ContractError("field set 'chain' needs d >= 3");
  } else if (kind == "permuted-chain") {
    if (permutation.size() != d) {
      throw ContractError("field set 'permuted-chain' needs a permutation of length d=" +
                          std::to_string(d));
    }
  } else if (kind == "heisenberg") {
    if (d != 3 || k != 2) throw ContractError("field set 'heisenberg' needs d=3 and k=2");
  } else if (kind != "coordinate") {
    throw ContractError("unknown field set '" + kind +
                        "' (expected chain, permuted-chain, coordinate, heisenberg)");
  }
  if (k == 0 || k > d) throw ContractError("need 1 <= k <= d");
  if (kind != "coordinate" && k < 2) throw ContractError("field set '" + kind + "' needs k >= 2");
}

std::vector<fields::FixedField> FieldSetSpec::build_fields(std::size_t d, std::size_t k) const {
  validate(d, k);
  if (kind == "coordinate") {
    std::vector<fields::FixedField> out;
    for (std::size_t i = 1; i <= k; ++i) out.push_back(fields::coordinate_field(i, d));
    return out;
  }
  const fields::FieldSet set = build(d, k);
  return {set.fields().begin(), set.fields().end()};
}

fields::FieldSet FieldSetSpec::build(std::size_t d, std::size_t k) const {
  validate(d, k);
  if (kind == "chain") return fields::chain_set(d, k);
  if (kind == "permuted-chain") return fields::permuted_chain_set(permutation, k);
  if (kind == "heisenberg") return fields::heisenberg_set();
  return fields::coordinate_set(d, k);
}

void RunConfig::validate() const {
  train.validate();
  field_set.validate(d, k);
  if (k < 2) throw ContractError("a flow model needs k >= 2 control fields");
  nets::MlpSpec{d + 1, hidden}.validate();
  if (data_path.empty() && n_data == 0) throw ContractError("n_data must be positive");
  if (!(mixture_sd > 0.0)) throw ContractError("mixture_sd must be positive");
}

void apply_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  auto& t = cfg.train;
  if (key == "iterations") t.iterations = parse_size(key, value);
  else if (key == "batch") t.batch = parse_size(key, value);
  else if (key == "learning_rate") t.learning_rate = parse_real(key, value);
  else if (key == "clip_norm") t.clip_norm = parse_real(key, value);
  else if (key == "k_steps") t.steps = parse_size(key, value);
  else if (key == "horizon") t.horizon = parse_real(key, value);
  else if (key == "seed") t.seed = parse_u64(key, value);
  else if (key == "dataset") t.dataset = value;
  else if (key == "adam_beta1") t.adam.beta1 = parse_real(key, value);
  else if (key == "adam_beta2") t.adam.beta2 = parse_real(key, value);
  else if (key == "adam_eps") t.adam.eps = parse_real(key, value);
  else if (key == "field_set") cfg.field_set.kind = value;
  else if (key == "permutation") cfg.field_set.permutation = parse_size_list(value);
  else if (key == "d") cfg.d = parse_size(key, value);
  else if (key == "k") cfg.k = parse_size(key, value);
  else if (key == "hidden") cfg.hidden = parse_size_list(value);
  else if (key == "data_path") cfg.data_path = value;
  else if (key == "n_data") cfg.n_data = parse_size(key, value);
  else if (key == "mixture_sd") cfg.mixture_sd = parse_real(key, value);
  else if (key == "out_dir") cfg.out_dir = value;
  else throw ParseError("unknown key '" + key + "'");
}

std::vector<Entry> entries(const RunConfig& cfg) {
  const auto& t = cfg.train;
  return {
      {"iterations", std::to_string(t.iterations)},
      {"batch", std::to_string(t.batch)},
      {"learning_rate", io::format_double(t.learning_rate)},
      {"clip_norm", io::format_double(t.clip_norm)},
      {"k_steps", std::to_string(t.steps)},
      {"horizon", io::format_double(t.horizon)},
      {"seed", std::to_string(t.seed)},
      {"dataset", t.dataset},
      {"adam_beta1", io::format_double(t.adam.beta1)},
      {"adam_beta2", io::format_double(t.adam.beta2)},
      {"adam_eps", io::format_double(t.adam.eps)},
      {"field_set", cfg.field_set.kind},
      {"permutation", format_size_list(cfg.field_set.permutation)},
      {"d", std::to_string(cfg.d)},
      {"k", std::to_string(cfg.k)},
      {"hidden", format_size_list(cfg.hidden)},
      {"data_path", cfg.data_path},
      {"n_data", std::to_string(cfg.n_data)},
      {"mixture_sd", io::format_double(cfg.mixture_sd)},
      {"out_dir", cfg.out_dir},
  };
}

std::vector<Entry> parse_key_values(const std::string& text) {
  std::vector<Entry> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string trimmed = io::trim(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ParseError("line " + std::to_string(line_no) + ": expected key=value");
    }
    out.emplace_back(io::trim(trimmed.substr(0, eq)), io::trim(trimmed.substr(eq + 1)));
  }
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  for (const auto& [key, value] : parse_key_values(text)) apply_entry(cfg, key, value);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(io::read_text(path));
}

std::string to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : entries(cfg)) out += key + "=" + value + "\n";
  return out;
}

}  // namespace chowflow::config
