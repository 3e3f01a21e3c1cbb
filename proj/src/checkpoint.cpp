#include "chowflow/checkpoint.hpp"

#include <charconv>
#include <map>

#include "chowflow/errors.hpp"
#include "chowflow/io.hpp"

namespace chowflow::checkpoint {

namespace {

std::string format_array(std::span<const double> values) {
  std::string out = std::to_string(values.size());
  for (double v : values) {
    out += ' ';
    out += io::format_double(v);
  }
  return out;
}

std::vector<double> parse_array(const std::string& key, const std::string& text) {
  std::vector<double> out;
  const char* p = text.data();
  const char* end = p + text.size();
  auto skip = [&] {
    while (p < end && *p == ' ') ++p;
  };
  skip();
  std::size_t count = 0;
  auto res = std::from_chars(p, end, count);
  if (res.ec != std::errc()) throw ParseError("key '" + key + "': missing element count");
  p = res.ptr;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    skip();
    double v = 0.0;
    res = std::from_chars(p, end, v);
    if (res.ec != std::errc()) {
      throw ParseError("key '" + key + "': bad value at element " + std::to_string(i));
    }
    out.push_back(v);
    p = res.ptr;
  }
  skip();
  if (p != end) throw ParseError("key '" + key + "': more values than the declared count");
  return out;
}

// Parses "control.<i>.<field>"; returns false for other keys.
bool split_control_key(const std::string& key, std::size_t& index, std::string& field) {
  constexpr std::string_view prefix = "control.";
  if (key.rfind(prefix, 0) != 0) return false;
  const auto dot = key.find('.', prefix.size());
  if (dot == std::string::npos) return false;
  const std::string num = key.substr(prefix.size(), dot - prefix.size());
  const auto res = std::from_chars(num.data(), num.data() + num.size(), index);
  if (num.empty() || res.ec != std::errc() || res.ptr != num.data() + num.size()) return false;
  field = key.substr(dot + 1);
  return true;
}

}  // namespace

flow::ControlledFlowModel Checkpoint::model() const {
  config.validate();
  if (specs.size() != config.k || params.size() != config.k) {
    throw ParseError("checkpoint has " + std::to_string(params.size()) + " controls, expected k=" +
                     std::to_string(config.k));
  }
  std::vector<nets::ControlNet> controls;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    // Rebuild the layout from the spec, then overwrite the values.
    nets::ControlNet net = nets::init_control_net(specs[i], 0);
    if (net.params().size() != params[i].size()) {
      throw ParseError("control " + std::to_string(i) + ": parameter count " +
                       std::to_string(params[i].size()) + " does not match its MLP shape (" +
                       std::to_string(net.params().size()) + ")");
    }
    net.params().assign(params[i]);
    controls.push_back(std::move(net));
  }
  return flow::ControlledFlowModel(config.field_set.build(config.d, config.k), std::move(controls),
                                   config.train.horizon);
}

Checkpoint make_checkpoint(const flow::ControlledFlowModel& model, const config::RunConfig& cfg,
                           std::optional<double> final_loss) {
  Checkpoint c;
  c.config = cfg;
  c.final_loss = final_loss;
  for (const auto& net : model.controls()) {
    c.specs.push_back(net.spec());
    const auto p = net.params().flat();
    c.params.emplace_back(p.begin(), p.end());
  }
  return c;
}

std::string to_text(const Checkpoint& ckpt) {
  std::string out = "format-version=" + std::to_string(ckpt.format_version) + "\n";
  out += config::to_text(ckpt.config);
  out += "final_loss=" + (ckpt.final_loss ? io::format_double(*ckpt.final_loss) : "none") + "\n";
  for (std::size_t i = 0; i < ckpt.specs.size(); ++i) {
    const std::string prefix = "control." + std::to_string(i) + ".";
    out += prefix + "hidden=" + config::format_size_list(ckpt.specs[i].hidden) + "\n";
    out += prefix + "params=" + format_array(ckpt.params[i]) + "\n";
  }
  return out;
}

Checkpoint from_text(const std::string& text) {
  const auto kv = config::parse_key_values(text);
  if (kv.empty() || kv.front().first != "format-version") {
    throw FormatVersionError("checkpoint must start with format-version");
  }
  Checkpoint c;
  if (kv.front().second != std::to_string(kFormatVersion)) {
    throw FormatVersionError("unsupported checkpoint format-version " + kv.front().second +
                             " (this build reads " + std::to_string(kFormatVersion) + ")");
  }
  std::map<std::size_t, std::vector<std::size_t>> hidden;
  std::map<std::size_t, std::vector<double>> params;
  for (std::size_t i = 1; i < kv.size(); ++i) {
    const auto& [key, value] = kv[i];
    std::size_t index = 0;
    std::string field;
    if (key == "final_loss") {
      if (value != "none") c.final_loss = io::parse_double(value);
    } else if (split_control_key(key, index, field)) {
      if (field == "hidden") {
        hidden[index] = config::parse_size_list(value);
      } else if (field == "params") {
        params[index] = parse_array(key, value);
      } else {
        throw ParseError("unknown checkpoint key '" + key + "'");
      }
    } else {
      config::apply_entry(c.config, key, value);
    }
  }
  for (std::size_t i = 0; i < c.config.k; ++i) {
    if (!hidden.count(i) || !params.count(i)) {
      throw ParseError("checkpoint is missing control " + std::to_string(i));
    }
    c.specs.push_back(nets::MlpSpec{c.config.d + 1, hidden[i]});
    c.params.push_back(std::move(params[i]));
  }
  if (hidden.size() != c.config.k || params.size() != c.config.k) {
    throw ParseError("checkpoint control count does not match k");
  }
  return c;
}

void save(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_text_atomic(path, to_text(ckpt));
}

Checkpoint load(const std::filesystem::path& path) { return from_text(io::read_text(path)); }

}  // namespace chowflow::checkpoint
