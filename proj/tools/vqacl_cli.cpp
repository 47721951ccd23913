// Command-line front end: dataset generation, training, evaluation, and
// gradient checking. Exit codes: 0 success, 1 runtime/data error, 2 usage.

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "vqacl/checks.hpp"
#include "vqacl/export.hpp"
#include "vqacl/model.hpp"
#include "vqacl/synth.hpp"
#include "vqacl/trainer.hpp"

namespace fs = std::filesystem;
using namespace vqacl;

namespace {

struct GenerateArgs {
  std::string out;
  GenerateConfig cfg;
};

int cmd_generate(const GenerateArgs& args) {
  const fs::path out(args.out);
  if (fs::exists(out)) throw std::runtime_error("output directory already exists: " + args.out);
  Dataset ds = generate_dataset(args.cfg);

  const fs::path tmp = args.out + ".tmp";
  fs::remove_all(tmp);
  write_dataset(ds, tmp);
  fs::rename(tmp, out);

  std::map<QuestionType, int> per_type;
  std::map<std::string, int> answers;
  for (const Triplet& t : ds.triplets) {
    ++per_type[t.type];
    ++answers[t.answer];
  }
  std::printf("wrote %zu triplets over %zu scenes to %s\n", ds.triplets.size(),
              ds.scenes.size(), args.out.c_str());
  std::printf("questions per type:\n");
  for (const auto& [type, count] : per_type)
    std::printf("  %-12s %d\n", type_name(type), count);
  std::printf("answer histogram:\n");
  for (const auto& [answer, count] : answers)
    std::printf("  %-8s %d\n", answer.c_str(), count);
  return 0;
}

std::array<double, kNumQuestionTypes> parse_priors(
    const std::vector<std::string>& entries,
    std::array<double, kNumQuestionTypes> priors) {
  for (const std::string& e : entries) {
    const std::size_t eq = e.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--prior expects type=weight, got '" + e + "'");
    const QuestionType type = parse_type(e.substr(0, eq));
    priors[static_cast<std::size_t>(type)] = std::stod(e.substr(eq + 1));
  }
  return priors;
}

struct TrainArgs {
  std::string data, out;
  std::string strategy = "spcl";
  std::string optimizer = "adaptive";
  std::string fusion = "product";
  std::string attention = "learned";
  std::string transform = "learned";
  std::vector<std::string> priors;
  TrainConfig train;
};

int cmd_train(const TrainArgs& args) {
  JobConfig job;
  job.train = args.train;
  job.train.strategy = parse_strategy(args.strategy);
  job.train.optimizer = parse_optimizer(args.optimizer);
  job.train.priors = parse_priors(args.priors, job.train.priors);
  job.model.fusion = parse_fusion(args.fusion);
  if (args.attention == "uniform") job.model.uniform_attention = true;
  else if (args.attention != "learned")
    throw std::runtime_error("--attention must be learned or uniform");
  if (args.transform == "identity") job.model.identity_transform = true;
  else if (args.transform != "learned")
    throw std::runtime_error("--transform must be learned or identity");

  const TrainOutcome outcome = run_training_job(args.data, args.out, job);
  std::printf("finished %zu epochs; best validation overall accuracy %.4f\n",
              outcome.traces.size(), outcome.best_val_oa);
  std::printf("run directory: %s\n", args.out.c_str());
  return 0;
}

struct EvalArgs {
  std::string data, model, split = "test", out, dump_attention, dump_transforms;
  int batch = 64;
  int threads = 1;
};

int cmd_eval(const EvalArgs& args) {
  VqaModel model = load_model(args.model);
  Dataset ds = read_dataset(args.data);
  if (!(build_train_vocab(ds) == model.vocab))
    throw std::runtime_error("vocabulary mismatch between model and dataset");

  const std::vector<int> idx = ds.split_triplets(parse_split(args.split));
  const MetricsReport report = evaluate(model, ds, idx, args.batch, args.threads);
  const std::string csv = metrics_csv(report);
  std::fputs(csv.c_str(), stdout);
  if (!args.out.empty()) {
    std::ofstream f(args.out);
    f << csv;
    if (!f) throw std::runtime_error("cannot write " + args.out);
  }

  if (!args.dump_attention.empty() || !args.dump_transforms.empty()) {
    const int spatial = ds.image_size / model.config.image_enc.total_downsampling();
    std::vector<TransformRow> rows;
    if (!args.dump_attention.empty()) fs::create_directories(args.dump_attention);
    if (!args.dump_transforms.empty()) fs::create_directories(args.dump_transforms);
    for (std::size_t begin = 0; begin < idx.size(); begin += static_cast<std::size_t>(args.batch)) {
      const std::size_t end =
          std::min(idx.size(), begin + static_cast<std::size_t>(args.batch));
      BatchInputs batch = make_batch(model, ds, idx, begin, end);
      Tape tape(Tape::Mode::kNoGrad);
      ForwardResult fwd = model.forward(tape, batch.images, batch.tokens);
      const auto maps = attention_heatmaps(fwd.attention_weights, spatial, spatial);
      for (std::size_t i = begin; i < end; ++i) {
        const Triplet& t = ds.triplets[static_cast<std::size_t>(idx[i])];
        const std::size_t k = i - begin;
        if (!args.dump_attention.empty()) {
          char name[64];
          std::snprintf(name, sizeof(name), "attention_%06d.csv", t.id);
          write_attention_csv(fs::path(args.dump_attention) / name, maps[k], spatial, spatial);
        }
        if (!args.dump_transforms.empty()) {
          TransformRow r1{t.id, 1, fwd.theta1.at(static_cast<std::int64_t>(k) * 4),
                          fwd.theta1.at(static_cast<std::int64_t>(k) * 4 + 1),
                          fwd.theta1.at(static_cast<std::int64_t>(k) * 4 + 2),
                          fwd.theta1.at(static_cast<std::int64_t>(k) * 4 + 3)};
          TransformRow r2{t.id, 2, fwd.theta2.at(static_cast<std::int64_t>(k) * 4),
                          fwd.theta2.at(static_cast<std::int64_t>(k) * 4 + 1),
                          fwd.theta2.at(static_cast<std::int64_t>(k) * 4 + 2),
                          fwd.theta2.at(static_cast<std::int64_t>(k) * 4 + 3)};
          rows.push_back(r1);
          rows.push_back(r2);
          char name[64];
          std::snprintf(name, sizeof(name), "overlay_%06d.ppm", t.id);
          // rectangles drawn on the original image, not the feature map
          const auto overlay = render_transform_overlay(ds.image_bytes(t.scene_id),
                                                        ds.image_size, r1, r2);
          write_ppm(fs::path(args.dump_transforms) / name, overlay, ds.image_size,
                    ds.image_size);
        }
      }
    }
    if (!args.dump_transforms.empty())
      write_transforms_csv(fs::path(args.dump_transforms) / "transforms.csv", rows);
  }
  return 0;
}

struct GradcheckArgs {
  std::string module = "all";
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 7;
};

int cmd_gradcheck(const GradcheckArgs& args) {
  std::vector<checks::ModuleCheck> results;
  const auto want = [&](const char* name, const char* alias = "") {
    return args.module == "all" || args.module == name || args.module == alias;
  };
  if (want("encoders"))
    results.push_back({"encoders", checks::check_encoders(args.seed, args.step, args.tolerance)});
  if (want("attention", "cga"))
    results.push_back({"attention", checks::check_attention(args.seed, args.step, args.tolerance)});
  if (want("transform", "cst"))
    results.push_back({"transform", checks::check_transform(args.seed, args.step, args.tolerance)});
  if (want("model"))
    results.push_back({"model", checks::check_model(args.seed, args.step, args.tolerance)});
  if (results.empty())
    throw std::runtime_error("unknown module '" + args.module +
                             "' (expected encoders, cga, cst, model, or all)");

  bool all_pass = true;
  for (const auto& [module, report] : results) {
    std::int64_t checked = 0, skipped = 0;
    for (const BlockCheck& b : report.blocks) {
      checked += b.checked;
      skipped += b.skipped_kinks;
    }
    const bool pass = report.pass(args.tolerance);
    all_pass = all_pass && pass;
    std::printf("%-10s worst rel err %.3e over %lld elements (%lld skipped at kinks): %s\n",
                module.c_str(), report.worst(), static_cast<long long>(checked),
                static_cast<long long>(skipped), pass ? "PASS" : "FAIL");
  }
  return all_pass ? 0 : 1;
}

}  // namespace

// Expands "--config FILE" into "--key=value" arguments for keys the command
// line does not already set, so explicit flags always win.
std::vector<std::string> apply_config_file(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file " + path);
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config file: expected key=value, got '" + line + "'");
    const std::string flag = "--" + line.substr(0, eq);
    bool given = false;
    for (const std::string& a : args)
      given = given || a == flag || a.rfind(flag + "=", 0) == 0;
    if (!given) args.push_back(flag + "=" + line.substr(eq + 1));
  }
  return args;
}

int main(int argc, char** argv) {
  CLI::App app{"synthetic-scene visual question answering with language-guided "
               "attention, learned crops, and self-paced curriculum training"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "create a synthetic dataset directory");
  generate->add_option("--out", gen.out, "output dataset directory")->required();
  generate->add_option("--scenes", gen.cfg.scenes, "number of scenes");
  generate->add_option("--questions", gen.cfg.questions_per_scene, "questions per scene");
  generate->add_option("--image-size", gen.cfg.image_size, "square image size in pixels");
  generate->add_option("--grid", gen.cfg.scene.grid, "scene grid cells per side");
  generate->add_option("--urban-threshold", gen.cfg.scene.urban_threshold,
                       "building fraction at which a scene counts as urban");
  generate->add_option("--seed", gen.cfg.seed, "generator seed");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "train a model and write a run directory");
  std::string config_path;
  train->add_option("--config", config_path,
                    "key=value file applied where no explicit flag is given");
  train->add_option("--data", tr.data, "dataset directory")->required();
  train->add_option("--out", tr.out, "run output directory")->required();
  train->add_option("--strategy", tr.strategy, "training strategy")
      ->check(CLI::IsMember({"shuffle", "spl", "spcl"}));
  train->add_option("--optimizer", tr.optimizer, "parameter update rule")
      ->check(CLI::IsMember({"adaptive", "sgd"}));
  train->add_option("--epochs", tr.train.epochs, "training epochs");
  train->add_option("--batch", tr.train.batch_size, "batch size");
  train->add_option("--lr", tr.train.learning_rate, "learning rate");
  train->add_option("--cl-epochs", tr.train.cl_epochs,
                    "epochs driven by the prior curriculum before self-paced updates");
  train->add_option("--tau0", tr.train.tau0, "initial curriculum budget fraction");
  train->add_option("--prior", tr.priors,
                    "per-type difficulty prior as type=weight (repeatable)");
  train->add_option("--seed", tr.train.seed, "training seed");
  train->add_option("--eval-threads", tr.train.eval_threads,
                    "threads for validation evaluation");
  train->add_option("--fusion", tr.fusion, "vision-language fusion")
      ->check(CLI::IsMember({"product", "sum", "concat"}));
  train->add_option("--attention", tr.attention, "global attention mode")
      ->check(CLI::IsMember({"learned", "uniform"}));
  train->add_option("--transform", tr.transform, "spatial transformer mode")
      ->check(CLI::IsMember({"learned", "identity"}));

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved model on a dataset split");
  eval_cmd->add_option("--data", ev.data, "dataset directory")->required();
  eval_cmd->add_option("--model", ev.model, "model file")->required();
  eval_cmd->add_option("--split", ev.split, "dataset split")
      ->check(CLI::IsMember({"train", "val", "test"}));
  eval_cmd->add_option("--out", ev.out, "metrics CSV output path");
  eval_cmd->add_option("--batch", ev.batch, "evaluation batch size");
  eval_cmd->add_option("--eval-threads", ev.threads, "evaluation threads");
  eval_cmd->add_option("--dump-attention", ev.dump_attention,
                       "directory for per-sample attention heatmap CSVs");
  eval_cmd->add_option("--dump-transforms", ev.dump_transforms,
                       "directory for transform CSV and image overlays");

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "compare analytic gradients with finite differences");
  gradcheck->add_option("--module", gc.module, "encoders, cga, cst, model, or all");
  gradcheck->add_option("--step", gc.step, "finite difference step");
  gradcheck->add_option("--tolerance", gc.tolerance, "max relative error accepted");
  gradcheck->add_option("--seed", gc.seed, "seed for micro inputs");

  std::vector<std::string> args;
  try {
    args = apply_config_file(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  try {
    std::reverse(args.begin(), args.end());  // CLI11 consumes back to front
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    return 2;
  }

  try {
    if (generate->parsed()) return cmd_generate(gen);
    if (train->parsed()) return cmd_train(tr);
    if (eval_cmd->parsed()) return cmd_eval(ev);
    if (gradcheck->parsed()) return cmd_gradcheck(gc);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
