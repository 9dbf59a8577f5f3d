// Command-line front end: train, infer, eval, bench, synth.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <omp.h>

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ddanet/data.hpp"
#include "ddanet/errors.hpp"
#include "ddanet/loss.hpp"
#include "ddanet/model.hpp"
#include "ddanet/trainer.hpp"

namespace fs = std::filesystem;
using namespace ddanet;

namespace {

constexpr int kRuntimeError = 1;
constexpr int kUsageError = 2;

// DDANET_NUM_THREADS wins over OMP_NUM_THREADS; unset means all cores.
void apply_thread_env(int flag) {
  int n = flag;
  if (n <= 0) {
    if (const char* s = std::getenv("DDANET_NUM_THREADS")) n = std::atoi(s);
  }
  if (n > 0) omp_set_num_threads(n);
}

const CLI::Validator kMultipleOf16 = CLI::Validator(
    [](std::string& s) -> std::string {
      try {
        const long v = std::stol(s);
        if (v > 0 && v % 16 == 0) return {};
      } catch (...) {
      }
      return "must be a positive multiple of 16";
    },
    "MULTIPLE_OF_16");

std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoul(tok));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw IoError(path.string(), "cannot open for writing");
  f << text;
  if (!f) throw IoError(path.string(), "write failed");
}

// Files of an --input argument: the file itself, or the images in a directory.
std::vector<fs::path> input_files(const fs::path& p) {
  if (!fs::is_directory(p)) return {p};
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(p)) {
    std::string ext = e.path().extension().string();
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (e.is_regular_file() && (ext == ".png" || ext == ".jpg" || ext == ".jpeg")) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

// Brings a 1x1xhxw map to H x W and scales it to [0,1] by its own range.
Image for_viewing(const Image& map, std::size_t h, std::size_t w) {
  Image r = resize_bilinear(map, h, w);
  float lo = r[0], hi = r[0];
  for (float v : r.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (auto& v : r.data()) v = hi > lo ? (v - lo) / (hi - lo) : 0.0f;
  return r;
}

struct TrainArgs {
  std::string data;
  std::size_t synthetic = 0;
  std::uint64_t synthetic_seed = 1;
  std::string out;
  std::string log;
  std::string best;
  std::string resume;
  std::string widths = "4,8,16,32";
  std::size_t se_ratio = 4;
  bool no_attention = false;
  double val_fraction = -1;
  std::uint64_t split_seed = 0;
  TrainConfig cfg;
};

ModelConfig model_config(const TrainArgs& a) {
  ModelConfig model;
  model.channel_widths = parse_widths(a.widths);
  model.se_ratio = a.se_ratio;
  if (a.no_attention) model.attention_stages.clear();
  model.input_h = model.input_w = a.cfg.input_size;
  return model;
}

int run_train(const TrainArgs& a) {
  const ModelConfig model = model_config(a);

  Dataset all = a.data.empty() ? synthetic_blobs(a.synthetic, a.cfg.input_size, a.synthetic_seed)
                               : load_directory(a.data);
  const double vf = a.val_fraction >= 0 ? a.val_fraction : (a.data.empty() ? 0.0 : 0.12);
  Dataset train_set, val_set;
  if (vf > 0) {
    std::tie(train_set, val_set) = split(all, SplitSpec{1.0 - vf, a.split_seed});
  } else {
    train_set = std::move(all);
  }

  const fs::path out = a.out;
  const fs::path log_path = a.log.empty() ? fs::path(a.out + ".log.jsonl") : fs::path(a.log);
  if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
  std::ofstream log(log_path);
  if (!log) throw IoError(log_path.string(), "cannot open for writing");

  TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord& r) {
    log << r.to_json() << '\n';
    log.flush();
    std::fprintf(stderr, "epoch %zu loss %.5f%s\n", r.epoch, r.loss_total,
                 r.val_dsc ? (" val_dsc " + std::to_string(*r.val_dsc)).c_str() : "");
  };
  hooks.on_checkpoint = [&](const Checkpoint& c) { save_checkpoint(c, out.string() + ".e" + std::to_string(c.epoch)); };
  if (!a.best.empty()) hooks.on_best = [&](const Checkpoint& c) { save_checkpoint(c, a.best); };

  std::optional<Checkpoint> resume;
  if (!a.resume.empty()) resume = load_checkpoint(a.resume);
  const auto result = train(model, a.cfg, train_set, val_set.empty() ? nullptr : &val_set, hooks,
                            resume ? &*resume : nullptr);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  save_checkpoint(result.final, out);
  std::printf("wrote %s (%zu epochs, %zu parameters)\n", out.string().c_str(), result.final.epoch,
              count_params(result.final.params));
  return 0;
}

struct InferArgs {
  std::string model, input, outdir;
  bool gray = false, attn = false;
  double threshold = 0.5;
};

int run_infer(const InferArgs& a) {
  const Checkpoint c = load_checkpoint(a.model);
  const std::size_t h = c.model.input_h, w = c.model.input_w;
  fs::create_directories(a.outdir);
  std::size_t ok = 0, failed = 0;
  for (const auto& path : input_files(a.input)) {
    Image image;
    try {
      image = load_image(path);
    } catch (const IoError& e) {
      std::fprintf(stderr, "warning: skipping %s\n", e.what());
      ++failed;
      continue;
    }
    const std::size_t H = image.dim(2), W = image.dim(3);
    const auto out = infer(c.params, resize_bilinear(image, h, w));
    // Probabilities go back to the input resolution before thresholding.
    Image mask = resize_bilinear(out.mask.value(), H, W);
    for (auto& v : mask.data()) v = v >= a.threshold ? 1.0f : 0.0f;
    const std::string stem = path.stem().string();
    save_mask_png(fs::path(a.outdir) / (stem + "_mask.png"), mask);
    if (a.gray) save_gray_png(fs::path(a.outdir) / (stem + "_gray.png"), resize_bilinear(out.gray.value(), H, W));
    if (a.attn) {
      for (std::size_t k = 0; k < out.attention_maps.size(); ++k) {
        save_gray_png(fs::path(a.outdir) / (stem + "_attn" + std::to_string(k + 1) + ".png"),
                      for_viewing(out.attention_maps[k].value(), H, W));
      }
    }
    ++ok;
  }
  std::printf("inferred %zu image(s), %zu skipped\n", ok, failed);
  return ok > 0 ? 0 : kRuntimeError;
}

struct EvalArgs {
  std::string model, data, report;
  double threshold = 0.5;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint c = load_checkpoint(a.model);
  const Dataset d = load_directory(a.data);
  const MetricsReport r = evaluate(c.params, d, a.threshold);
  if (!a.report.empty()) write_text(a.report, r.to_json() + "\n");
  std::printf("n=%zu dsc=%.4f miou=%.4f recall=%.4f precision=%.4f fps=%.1f\n", r.n_images, r.dsc, r.miou,
              r.recall, r.precision, r.fps);
  return 0;
}

struct BenchArgs {
  std::string model, report;
  std::size_t size = 64, n = 100, warmup = 10;
  bool tiny = false;
};

int run_bench(const BenchArgs& a) {
  DDANetParams<float> params;
  if (!a.model.empty()) {
    params = load_checkpoint(a.model).params;
  } else {
    params = build<float>(a.tiny ? ModelConfig::tiny(a.size) : ModelConfig{}, 0);
  }
  const BenchResult r = fps_benchmark(params, a.size, a.size, a.warmup, a.n);
  if (!a.report.empty()) write_text(a.report, r.to_json() + "\n");
  std::printf("size=%zu threads=%d fps=%.2f mean=%.3fms p50=%.3fms p95=%.3fms\n", a.size, omp_get_max_threads(), r.fps,
              r.mean_ms, r.p50_ms, r.p95_ms);
  return 0;
}

struct SynthArgs {
  std::size_t n = 16, size = 64;
  std::uint64_t seed = 0;
  std::string out;
};

int run_synth(const SynthArgs& a) {
  export_dataset(synthetic_blobs(a.n, a.size, a.seed), a.out);
  std::printf("wrote %zu pairs to %s\n", a.n, a.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DDANet polyp segmentation"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker threads (default: DDANET_NUM_THREADS, OMP_NUM_THREADS, all cores)");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "train a model and write a checkpoint plus a JSONL log");
  auto* src = tr->add_option_group("source");
  src->add_option("--data", ta.data, "dataset root with images/ and masks/")->check(CLI::ExistingDirectory);
  src->add_option("--synthetic", ta.synthetic, "number of synthetic images")->check(CLI::PositiveNumber);
  src->require_option(1);
  tr->add_option("--synthetic-seed", ta.synthetic_seed, "seed of the synthetic generator");
  tr->add_option("--size", ta.cfg.input_size, "training resolution")->check(kMultipleOf16);
  tr->add_option("--epochs", ta.cfg.epochs)->check(CLI::PositiveNumber);
  tr->add_option("--batch", ta.cfg.batch_size)->check(CLI::PositiveNumber);
  tr->add_option("--lr", ta.cfg.learning_rate)->check(CLI::PositiveNumber);
  tr->add_option("--seed", ta.cfg.seed);
  tr->add_option("--lambda", ta.cfg.loss.reconstruction_weight, "weight of the grayscale loss")
      ->check(CLI::NonNegativeNumber);
  tr->add_option("--checkpoint-every", ta.cfg.checkpoint_every, "also write <out>.e<epoch> every N epochs");
  tr->add_option("--widths", ta.widths, "four encoder widths, e.g. 32,64,128,256");
  tr->add_option("--se-ratio", ta.se_ratio)->check(CLI::PositiveNumber);
  tr->add_flag("--no-attention", ta.no_attention, "disable the attention gates");
  tr->add_option("--val-fraction", ta.val_fraction, "held-out share (default 0.12 for --data, 0 for --synthetic)")
      ->check(CLI::Range(0.0, 0.99));
  tr->add_option("--split-seed", ta.split_seed);
  tr->add_option("--resume", ta.resume, "continue from a checkpoint")->check(CLI::ExistingFile);
  tr->add_option("--best", ta.best, "write the best-validation checkpoint here");
  tr->add_option("--log", ta.log, "JSONL log path (default <out>.log.jsonl)");
  tr->add_option("--out", ta.out, "checkpoint path")->required();

  InferArgs ia;
  auto* inf = app.add_subcommand("infer", "write binary mask PNGs for an image or a directory of images");
  inf->add_option("--model", ia.model)->required()->check(CLI::ExistingFile);
  inf->add_option("--input", ia.input)->required()->check(CLI::ExistingPath);
  inf->add_option("--outdir", ia.outdir)->required();
  inf->add_flag("--gray", ia.gray, "also write the grayscale reconstruction");
  inf->add_flag("--attn", ia.attn, "also write the attention maps, range-normalised");
  inf->add_option("--threshold", ia.threshold)->check(CLI::Range(0.0, 1.0));

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score a model on a dataset directory");
  ev->add_option("--model", ea.model)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ea.data)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--report", ea.report, "JSON report path");
  ev->add_option("--threshold", ea.threshold)->check(CLI::Range(0.0, 1.0));

  BenchArgs ba;
  auto* be = app.add_subcommand("bench", "time single-image inference");
  be->add_option("--model", ba.model, "checkpoint (default: freshly built weights)")->check(CLI::ExistingFile);
  be->add_flag("--tiny", ba.tiny, "with no --model, build the 4,8,16,32 network instead of the default");
  be->add_option("--size", ba.size)->check(kMultipleOf16);
  be->add_option("--n", ba.n, "timed runs")->check(CLI::PositiveNumber);
  be->add_option("--warmup", ba.warmup);
  be->add_option("--report", ba.report, "JSON report path");

  SynthArgs sa;
  auto* sy = app.add_subcommand("synth", "write a synthetic dataset in the images/ masks/ layout");
  sy->add_option("--n", sa.n)->check(CLI::PositiveNumber);
  sy->add_option("--size", sa.size)->check(kMultipleOf16);
  sy->add_option("--seed", sa.seed);
  sy->add_option("--out", sa.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  apply_thread_env(threads);
  if (*tr) {
    // Flag values the parser cannot judge alone are still usage errors.
    try {
      model_config(ta).validate();
      ta.cfg.validate();
    } catch (const std::exception& e) {
      std::fprintf(stderr, "usage error: %s\n", e.what());
      return kUsageError;
    }
  }
  try {
    if (*tr) return run_train(ta);
    if (*inf) return run_infer(ia);
    if (*ev) return run_eval(ea);
    if (*be) return run_bench(ba);
    if (*sy) return run_synth(sa);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntimeError;
  }
  return kUsageError;
}
