#include "chowflow/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>

#include <CLI11.hpp>

#include "chowflow/checkpoint.hpp"
#include "chowflow/config.hpp"
#include "chowflow/data.hpp"
#include "chowflow/errors.hpp"
#include "chowflow/fields.hpp"
#include "chowflow/flow.hpp"
#include "chowflow/io.hpp"
#include "chowflow/rng.hpp"
#include "chowflow/train.hpp"

namespace chowflow::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kDataStream = 0xda7a;

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> config;
  std::optional<std::size_t> k_steps;

  std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(fallback); }
  std::string out_or(const std::string& fallback) const { return out.value_or(fallback); }
  std::size_t steps_or(std::size_t fallback) const { return k_steps.value_or(fallback); }
};

std::string loss_csv(const train::LossHistory& history) {
  std::string out = "iteration,nll\n";
  for (const auto& r : history) {
    out += std::to_string(r.iteration) + "," + io::format_double(r.nll) + "\n";
  }
  return out;
}

void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string name;
  std::size_t n = data::kDefaultTrainingSize;
  std::size_t d = 3;
};

int cmd_gen_data(const GenDataArgs& a, const GlobalOptions& g, std::ostream& out) {
  if (!data::is_known_dataset(a.name)) {
    throw ContractError("unknown dataset '" + a.name +
                        "' (expected moons3d, mixture, torus3d, gaussian)");
  }
  const data::Dataset ds = data::generate(a.name, a.n, g.seed_or(0), a.d);
  const std::string path = g.out_or(a.name + ".csv");
  data::write_dataset(ds, path);
  out << "wrote " << ds.size() << " x " << ds.dim() << " points to " << path << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

diff::Matrix training_data(const config::RunConfig& cfg) {
  if (!cfg.data_path.empty()) return data::read_csv(cfg.data_path);
  const std::string& name = cfg.train.dataset;
  const std::uint64_t seed = mix_seed(cfg.train.seed, kDataStream);
  if (name == "mixture") return data::gen_mixture(cfg.n_data, cfg.d, seed, cfg.mixture_sd).points;
  if (!data::is_known_dataset(name)) {
    throw ContractError("unknown dataset '" + name + "' in config");
  }
  return data::generate(name, cfg.n_data, seed, cfg.d).points;
}

int cmd_train(const GlobalOptions& g, std::ostream& out, std::ostream& err) {
  if (!g.config) throw ContractError("train requires --config <path>");
  config::RunConfig cfg = config::load_run_config(*g.config);
  if (g.seed) cfg.train.seed = *g.seed;
  if (g.out) cfg.out_dir = *g.out;
  if (g.k_steps) cfg.train.steps = *g.k_steps;
  cfg.validate();

  const diff::Matrix dataset = training_data(cfg);
  if (static_cast<std::size_t>(dataset.cols()) != cfg.d) {
    throw ContractError("training data has " + std::to_string(dataset.cols()) +
                        " columns, config says d=" + std::to_string(cfg.d));
  }

  flow::ControlledFlowModel model = flow::ControlledFlowModel::initialize(
      cfg.field_set.build(cfg.d, cfg.k), cfg.mlp_spec(), cfg.train.seed, cfg.train.horizon);

  const fs::path dir = cfg.out_dir;
  ensure_directory(dir);

  const std::size_t report_every = std::max<std::size_t>(1, cfg.train.iterations / 20);
  train::LossHistory history;
  try {
    history = train::train_loop(model, dataset, cfg.train, [&](const train::IterationStats& s) {
      if (s.iteration % report_every == 0 || s.iteration + 1 == cfg.train.iterations) {
        out << "iter " << s.iteration << " nll " << s.nll << " grad_norm " << s.grad_norm << "\n";
        out.flush();
      }
    });
  } catch (const train::TrainingAborted& e) {
    io::write_text_atomic(dir / "loss.csv", loss_csv(e.history()));
    err << "error: " << e.what() << "\n";
    return kNumeric;
  }

  std::optional<double> final_loss;
  if (!history.empty()) final_loss = history.back().nll;
  checkpoint::save(checkpoint::make_checkpoint(model, cfg, final_loss), dir / "checkpoint.txt");
  io::write_text_atomic(dir / "loss.csv", loss_csv(history));
  if (final_loss) {
    out << "initial_nll=" << io::format_double(history.front().nll) << "\n";
    out << "final_nll=" << io::format_double(*final_loss) << "\n";
  } else {
    out << "final_nll=none (0 iterations)\n";
  }
  out << "checkpoint=" << (dir / "checkpoint.txt").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct SampleArgs {
  std::string checkpoint;
  std::size_t n = 2000;
};

int cmd_sample(const SampleArgs& a, const GlobalOptions& g, std::ostream& out) {
  const flow::ControlledFlowModel model = checkpoint::load(a.checkpoint).model();
  const diff::Matrix x = flow::sample(model, a.n, g.seed_or(0),
                                      {g.steps_or(flow::kSampleSteps), flow::Direction::Forward});
  const std::string path = g.out_or("samples.csv");
  data::write_csv(x, path);
  out << "wrote " << a.n << " samples to " << path << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
};

int cmd_eval(const EvalArgs& a, const GlobalOptions& g, std::ostream& out) {
  const flow::ControlledFlowModel model = checkpoint::load(a.checkpoint).model();
  const diff::Matrix x = data::read_csv(a.data);
  if (static_cast<std::size_t>(x.cols()) != model.dim()) {
    throw ContractError("data has " + std::to_string(x.cols()) + " columns, model has d=" +
                        std::to_string(model.dim()));
  }
  if (x.rows() == 0) throw ContractError("data file has no rows");
  const Eigen::VectorXd log_p = flow::log_likelihood(model, x, g.steps_or(flow::kSampleSteps));

  std::string csv = "row,loglik\n";
  for (Eigen::Index i = 0; i < log_p.size(); ++i) {
    csv += std::to_string(i) + "," + io::format_double(log_p(i)) + "\n";
  }
  const std::string path = g.out_or("loglik.csv");
  io::write_text_atomic(path, csv);
  out << "rows=" << log_p.size() << "\n";
  out << "mean_nll=" << io::format_double(-log_p.mean()) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct BracketArgs {
  std::string field_set = "chain";
  std::size_t d = 3;
  std::size_t k = 2;
  std::optional<std::size_t> depth;
  std::size_t n_points = 100;
  std::vector<std::size_t> permutation;
  double tol = fields::kRankTolerance;
};

int cmd_check_brackets(const BracketArgs& a, const GlobalOptions& g, std::ostream& out) {
  const config::FieldSetSpec spec{a.field_set, a.permutation};
  const std::vector<fields::FixedField> set = spec.build_fields(a.d, a.k);
  const std::size_t depth = a.depth.value_or(a.d > 3 ? a.d - 2 : 1);
  if (a.n_points == 0) throw ContractError("--n-points must be positive");
  const diff::Matrix points = data::standard_normal(a.n_points, a.d, g.seed_or(0));

  std::string csv = "point";
  for (std::size_t j = 1; j <= a.d; ++j) csv += ",x" + std::to_string(j);
  csv += ",rank\n";

  std::size_t min_rank = a.d, max_rank = 0;
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const fields::Vector x = points.row(i).transpose();
    const std::size_t rank = fields::bracket_generating_rank(set, x, depth, a.tol);
    min_rank = std::min(min_rank, rank);
    max_rank = std::max(max_rank, rank);
    csv += std::to_string(i);
    for (Eigen::Index j = 0; j < x.size(); ++j) csv += "," + io::format_double(x(j));
    csv += "," + std::to_string(rank) + "\n";
  }
  if (g.out) io::write_text_atomic(*g.out, csv);

  const bool pass = min_rank == a.d;
  out << "field_set=" << a.field_set << " d=" << a.d << " k=" << a.k << " depth=" << depth
      << " points=" << a.n_points << " tol=" << a.tol << "\n";
  out << "min_rank=" << min_rank << " max_rank=" << max_rank << "\n";
  out << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? kOk : kCertificationFailed;
}

// ---------------------------------------------------------------------------

struct TrajectoryArgs {
  std::string checkpoint;
  std::string x0;
};

int cmd_export_trajectory(const TrajectoryArgs& a, const GlobalOptions& g, std::ostream& out) {
  const flow::ControlledFlowModel model = checkpoint::load(a.checkpoint).model();
  diff::Matrix start;
  if (!a.x0.empty()) {
    std::vector<double> coords;
    std::stringstream ss(a.x0);
    std::string item;
    while (std::getline(ss, item, ',')) coords.push_back(io::parse_double(item));
    if (coords.size() != model.dim()) {
      throw ContractError("--x0 has " + std::to_string(coords.size()) + " coordinates, model has d=" +
                          std::to_string(model.dim()));
    }
    start = Eigen::Map<diff::Matrix>(coords.data(), 1, static_cast<Eigen::Index>(coords.size()));
  } else {
    start = data::standard_normal(1, model.dim(), g.seed_or(0));
  }

  std::string csv = "step,t";
  for (std::size_t j = 1; j <= model.dim(); ++j) csv += ",x" + std::to_string(j);
  csv += ",delta\n";
  const flow::SolverConfig solver{g.steps_or(flow::kSampleSteps), flow::Direction::Forward};
  flow::integrate_augmented(model, start, solver,
                            [&](std::size_t step, double t, const diff::Matrix& x,
                                const diff::Matrix& delta) {
                              csv += std::to_string(step) + "," + io::format_double(t);
                              for (Eigen::Index j = 0; j < x.cols(); ++j) {
                                csv += "," + io::format_double(x(0, j));
                              }
                              csv += "," + io::format_double(delta(0, 0)) + "\n";
                            });
  const std::string path = g.out_or("trajectory.csv");
  io::write_text_atomic(path, csv);
  out << "wrote " << solver.steps + 1 << " trajectory rows to " << path << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Controlled continuous-time flows over bracket-generating vector fields", "chowflow"};
  app.require_subcommand(1);

  GlobalOptions g;
  app.add_option("--seed", g.seed, "RNG seed");
  app.add_option("--out", g.out, "Output path (file, or directory for train)");
  app.add_option("--config", g.config, "Run configuration file (key=value)");
  app.add_option("--k-steps", g.k_steps, "Number of RK4 steps")->check(CLI::PositiveNumber);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset as CSV");
  gen_cmd->add_option("name", gen.name, "moons3d | mixture | torus3d | gaussian")->required();
  gen_cmd->add_option("--n", gen.n, "Number of points")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--d", gen.d, "Dimension (mixture, gaussian)")->check(CLI::PositiveNumber);

  auto* train_cmd = app.add_subcommand("train", "Train a model from a config file");

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint");
  sample_cmd->add_option("--checkpoint", sample.checkpoint)->required();
  sample_cmd->add_option("--n", sample.n)->check(CLI::PositiveNumber);

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Per-row log-likelihood of a data CSV");
  eval_cmd->add_option("--checkpoint", eval.checkpoint)->required();
  eval_cmd->add_option("--data", eval.data)->required();

  BracketArgs br;
  auto* br_cmd = app.add_subcommand("check-brackets", "Certify the bracket-generating rank");
  br_cmd->add_option("--field-set", br.field_set, "chain | permuted-chain | coordinate | heisenberg");
  br_cmd->add_option("--d", br.d);
  br_cmd->add_option("--k", br.k, "Number of fields");
  br_cmd->add_option("--depth", br.depth, "Maximum bracket order (default d-2, at least 1)");
  br_cmd->add_option("--n-points", br.n_points);
  br_cmd->add_option("--permutation", br.permutation, "1-based coordinate order")->delimiter(',');
  br_cmd->add_option("--tol", br.tol, "Singular-value threshold");

  TrajectoryArgs traj;
  auto* traj_cmd = app.add_subcommand("export-trajectory", "Write one forward trajectory as CSV");
  traj_cmd->add_option("--checkpoint", traj.checkpoint)->required();
  traj_cmd->add_option("--x0", traj.x0, "Start point x1,...,xd (default: base draw from --seed)");

  for (auto* sub : app.get_subcommands([](const CLI::App*) { return true; })) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    if (gen_cmd->parsed()) return cmd_gen_data(gen, g, out);
    if (train_cmd->parsed()) return cmd_train(g, out, err);
    if (sample_cmd->parsed()) return cmd_sample(sample, g, out);
    if (eval_cmd->parsed()) return cmd_eval(eval, g, out);
    if (br_cmd->parsed()) return cmd_check_brackets(br, g, out);
    if (traj_cmd->parsed()) return cmd_export_trajectory(traj, g, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kIo;
  } catch (const NumericError& e) {
    err << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    // Contract, parse, and format-version errors are all usage problems.
    err << "error: " << e.what() << "\n";
    return kUsage;
  }
  err << "error: no command given\n";
  return kUsage;
}

}  // namespace chowflow::cli
