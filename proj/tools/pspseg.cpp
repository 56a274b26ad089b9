#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "pspseg/checkpoint.hpp"
#include "pspseg/data.hpp"
#include "pspseg/errors.hpp"
#include "pspseg/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

pspseg::Dims3 parse_dims(const std::string& text) {
  pspseg::Dims3 d{};
  std::stringstream ss(text);
  std::string part;
  int n = 0;
  while (std::getline(ss, part, ',')) {
    if (n == 3) throw pspseg::ConfigError("--dims takes exactly three extents, got '" + text + "'");
    try {
      std::size_t used = 0;
      d[n] = std::stoll(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw pspseg::ConfigError("bad extent '" + part + "' in --dims");
    }
    ++n;
  }
  if (n != 3) throw pspseg::ConfigError("--dims takes exactly three extents, got '" + text + "'");
  return d;
}

void emit(const json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(1) << "\n";
    return;
  }
  std::ofstream f(out);
  if (!f) throw pspseg::IoError("cannot write " + out);
  f << j.dump(1) << "\n";
}

std::string kernel_str(const json& k) {
  return std::to_string(k[0].get<int>()) + "x" + std::to_string(k[1].get<int>()) + "x" + std::to_string(k[2].get<int>());
}

// Grid of prm rows x branch columns; '#' active, 'm' masked, '.' pruned.
std::string branch_grid(const json& arch) {
  std::ostringstream s;
  const auto& ids = arch.at("prm_ids");
  const auto& states = arch.at("branch_states");
  std::size_t width = 0;
  for (const auto& row : states) width = std::max(width, row.size());
  s << std::left << std::setw(6) << "prm";
  for (std::size_t b = 0; b < width; ++b) s << std::setw(4) << ("b" + std::to_string(b));
  s << "kernels\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    s << std::setw(6) << ids[i].get<std::string>();
    for (std::size_t b = 0; b < width; ++b) {
      std::string cell = " ";
      if (b < states[i].size()) {
        const auto st = states[i][b].get<std::string>();
        cell = st == "Active" ? "#" : st == "Masked" ? "m" : ".";
      }
      s << std::setw(4) << cell;
    }
    const auto& kernels = arch.contains("prm_kernels") ? arch.at("prm_kernels").at(i) : arch.at("kernels");
    for (std::size_t b = 0; b < kernels.size(); ++b) s << (b ? " " : "") << kernel_str(kernels[b]);
    s << "\n";
  }
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pspseg: progressive structured pruning for volumetric segmentation"};
  app.require_subcommand(1);

  std::string out_dir, dims_text = "32,32,32";
  std::size_t count = 200;
  std::uint64_t seed = 0;
  double test_fraction = 0.2;
  auto* gen = app.add_subcommand("generate-data", "Write a synthetic phantom dataset");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--count", count, "number of cases")->required();
  gen->add_option("--dims", dims_text, "D,H,W");
  gen->add_option("--seed", seed, "dataset seed");
  gen->add_option("--test-fraction", test_fraction, "fraction of cases held out as test");

  std::string config_path, resume_path;
  bool quiet = false;
  auto* tr = app.add_subcommand("train", "Train (psp or retrain mode)");
  tr->add_option("--config", config_path, "TrainConfig JSON")->required()->check(CLI::ExistingFile);
  tr->add_option("--resume", resume_path, "checkpoint directory to resume from");
  tr->add_flag("--quiet", quiet, "no per-epoch lines");

  std::string ckpt_path, split = "test", report_out;
  auto* ev = app.add_subcommand("eval", "Sliding-window evaluation of a checkpoint");
  ev->add_option("--config", config_path, "TrainConfig JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--ckpt", ckpt_path, "checkpoint directory")->required();
  ev->add_option("--split", split, "train or test");
  ev->add_option("--out", report_out, "write the JSON report here instead of stdout");

  bool json_only = false;
  auto* in = app.add_subcommand("inspect", "Show a checkpoint's architecture and branch states");
  in->add_option("--ckpt", ckpt_path, "checkpoint directory")->required();
  in->add_flag("--json", json_only, "JSON only");

  std::string events_path;
  auto* tl = app.add_subcommand("timeline", "Per-epoch branch-state matrices from an event log");
  tl->add_option("--events", events_path, "events.jsonl")->required()->check(CLI::ExistingFile);
  tl->add_option("--out", report_out, "write JSON here instead of stdout");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto spec = pspseg::PhantomSpec::for_dims(parse_dims(dims_text));
      const auto m = pspseg::generate_dataset(out_dir, count, spec, seed, test_fraction);
      std::cout << "wrote " << m.cases.size() << " cases (" << m.split_indices("train").size() << " train, "
                << m.split_indices("test").size() << " test) to " << (fs::path(out_dir) / "manifest.json").string()
                << "\n";
    } else if (*tr) {
      const auto cfg = pspseg::read_train_config(config_path);
      std::optional<fs::path> resume;
      if (!resume_path.empty()) resume = resume_path;
      const auto result = pspseg::train(cfg, resume, [&](const pspseg::EpochRecord& r, const auto&) {
        if (quiet) return;
        std::printf("epoch %4d  seg %.4f  tr %.4f  rl %.4f  total %.4f  params %lld  active %lld  %s  %.1fs\n", r.epoch,
                    r.l_seg, r.l_tr, r.l_rl, r.l_total, static_cast<long long>(r.params_effective),
                    static_cast<long long>(r.branches_active), r.event.c_str(), r.seconds);
        std::fflush(stdout);
      });
      const auto& mean = result.final_metrics.at("mean");
      std::cout << "done: params " << result.initial_params << " -> " << result.final_params << ", test DSC "
                << mean.at("dsc").dump() << ", checkpoint " << result.final_checkpoint.string() << "\n";
    } else if (*ev) {
      const auto cfg = pspseg::read_train_config(config_path);
      emit(pspseg::evaluate(cfg, ckpt_path, split), report_out);
    } else if (*in) {
      const auto m = pspseg::read_checkpoint_manifest(ckpt_path);
      json summary = {{"epoch", m.at("epoch")},
                      {"dtype", m.at("dtype")},
                      {"architecture", m.at("architecture")},
                      {"controller",
                       {{"p", m.at("controller").at("p")},
                        {"phase", m.at("controller").at("phase")},
                        {"masked_set", m.at("controller").at("masked_set")}}}};
      std::int64_t total = 0;
      for (const auto& p : m.at("parameters")) total += p.at("count").get<std::int64_t>();
      summary["stored_parameters"] = total;
      if (!json_only) {
        const auto& arch = m.at("architecture");
        std::cout << "checkpoint " << ckpt_path << "  epoch " << m.at("epoch") << "  " << m.at("dtype").get<std::string>()
                  << "  depth " << arch.at("depth") << "  channels " << arch.at("channels").dump() << "\n"
                  << "stored parameters " << total << "  p " << m.at("controller").at("p") << "  phase "
                  << m.at("controller").at("phase").get<std::string>() << "\n\n"
                  << branch_grid(arch) << "\n";
      }
      std::cout << summary.dump(1) << "\n";
    } else if (*tl) {
      emit(pspseg::build_timeline(pspseg::read_events(events_path)), report_out);
    }
  } catch (const pspseg::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
