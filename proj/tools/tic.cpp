// tic: train, encode, decode, eval and saliency front end.
//
// Exit codes: 0 success, 2 usage, 3 checkpoint missing/invalid/mismatched,
// 4 unreadable or unwritable image, 5 corrupt bitstream, 6 training diverged,
// 1 anything else.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include "tic/codec.hpp"
#include "tic/image.hpp"
#include "tic/train.hpp"

namespace fs = std::filesystem;
using namespace tic;

namespace {

enum Exit : int {
  kOk = 0,
  kOther = 1,
  kUsage = 2,
  kCheckpoint = 3,
  kImage = 4,
  kStream = 5,
  kDiverged = 6,
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::vector<std::uint8_t> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open bitstream " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const fs::path& p, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("cannot write " + p.string());
}

unsigned thread_cap() {
  unsigned n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("TIC_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) n = std::min<unsigned>(n, static_cast<unsigned>(v));
  }
  return n;
}

std::vector<fs::path> image_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ImageError("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension().string();
    if (ext == ".ppm" || ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw ImageError("no .ppm or .png images in " + dir.string());
  return files;
}

struct Coded {
  std::vector<std::uint8_t> bytes;
  ImageBuffer reconstruction;  // cropped to the original size
};

Coded code_image(const TicModel& model, const ImageBuffer& img) {
  const auto padded = pad_reflect(img, ModelConfig::kSpatialMultiple);
  const auto r = codec::encode(model, padded.image.to_tensor(), padded.height, padded.width);
  return {serialize(r.stream), crop_back(ImageBuffer::from_tensor(r.x_hat), padded.height, padded.width)};
}

double psnr_8bit(const ImageBuffer& a, const ImageBuffer& b) {
  double se = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = (static_cast<double>(a.pixels[i]) - b.pixels[i]) / 255.0;
    se += d * d;
  }
  return train::psnr_from_mse(se / static_cast<double>(a.pixels.size()));
}

// --- commands ---------------------------------------------------------------

struct TrainArgs {
  std::string preset = "toy-16";
  std::optional<double> lambda;
  int steps = 200;
  std::uint64_t seed = 0;
  int batch = 8;
  int crop = 256;
  double lr = 1e-4;
  std::string input, output, checkpoint, csv;
  int synthetic = 16;
  int synthetic_size = 64;
};

int run_train(const TrainArgs& a) {
  if (a.output.empty()) throw UsageError("train: --output checkpoint path is required");
  TicModel model = a.checkpoint.empty() ? TicModel(preset(a.preset), a.seed) : load_checkpoint(a.checkpoint);
  train::TrainConfig cfg;
  cfg.lambda = a.lambda.value_or(model.config().lambda);
  cfg.steps = a.steps;
  cfg.seed = a.seed;
  cfg.batch_size = a.batch;
  cfg.crop = a.crop;
  cfg.lr = a.lr;
  train::Dataset data = a.input.empty() ? train::Dataset(train::synthetic_images(a.synthetic, a.synthetic_size, a.seed))
                                        : train::Dataset::from_directory(a.input);
  std::cerr << "training " << model.config().name << " (" << model.parameter_count() << " parameters) on "
            << data.size() << " images, lambda " << cfg.lambda << ", " << cfg.steps << " steps\n";
  const auto t0 = std::chrono::steady_clock::now();
  const auto log = train::fit(model, data, cfg, [&](int step, const train::StepMetrics& m) {
    if (step % 10 == 0 || step + 1 == cfg.steps) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::fprintf(stderr, "step %d loss %.4f bpp %.4f mse %.6f grad_norm %.3f (%.1fs)\n", step, m.loss, m.bpp,
                   m.mse, m.grad_norm, secs);
    }
  });
  save_checkpoint(model, a.output);
  if (!a.csv.empty()) {
    std::ofstream out(a.csv);
    train::write_metrics_csv(out, log);
    if (!out) throw std::runtime_error("cannot write " + a.csv);
  }
  return kOk;
}

int run_encode(const std::string& ckpt, const std::string& input, const std::string& output) {
  const TicModel model = load_checkpoint(ckpt);
  const ImageBuffer img = read_image(input);
  const Coded c = code_image(model, img);
  write_file(output, c.bytes);
  const auto size = fs::file_size(output);
  std::printf("bpp %.6f\n", train::bpp(static_cast<std::size_t>(size), img.height, img.width));
  return kOk;
}

int run_decode(const std::string& ckpt, const std::string& input, const std::string& output) {
  const TicModel model = load_checkpoint(ckpt);
  const BitStream bs = parse_bitstream(read_file(input));
  const Tensor x_hat = codec::decode(model, bs);
  write_image(output, crop_back(ImageBuffer::from_tensor(x_hat), bs.height, bs.width));
  return kOk;
}

int run_eval(const std::string& ckpt, const std::string& input, const std::string& csv) {
  const TicModel model = load_checkpoint(ckpt);
  const auto files = image_files(input);
  std::vector<ImageBuffer> images;
  for (const auto& f : files) images.push_back(read_image(f));

  struct Row {
    double bpp = 0, psnr = 0;
  };
  std::vector<Row> rows(files.size());
  std::vector<std::exception_ptr> errors(files.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < files.size();) {
      try {
        const Coded c = code_image(model, images[i]);
        // the decoder must reproduce the encoder's reconstruction
        const BitStream bs = parse_bitstream(c.bytes);
        const ImageBuffer dec = crop_back(ImageBuffer::from_tensor(codec::decode(model, bs)), bs.height, bs.width);
        if (dec.pixels != c.reconstruction.pixels) throw FormatError("decoder disagrees with encoder on " + files[i].string());
        rows[i] = {train::bpp(c.bytes.size(), images[i].height, images[i].width), psnr_8bit(images[i], dec)};
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const unsigned n = std::min<unsigned>(thread_cap(), static_cast<unsigned>(files.size()));
  std::vector<std::thread> pool;
  for (unsigned t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  std::ofstream file;
  if (!csv.empty()) {
    file.open(csv);
    if (!file) throw std::runtime_error("cannot write " + csv);
  }
  std::ostream& out = csv.empty() ? std::cout : file;
  out << "name,bpp,psnr\n";
  Row mean;
  char buf[128];
  for (std::size_t i = 0; i < files.size(); ++i) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.4f\n", rows[i].bpp, rows[i].psnr);
    out << files[i].filename().string() << buf;
    mean.bpp += rows[i].bpp / static_cast<double>(files.size());
    mean.psnr += rows[i].psnr / static_cast<double>(files.size());
  }
  std::snprintf(buf, sizeof buf, "mean,%.6f,%.4f\n", mean.bpp, mean.psnr);
  out << buf;
  return kOk;
}

int run_saliency(const std::string& ckpt, const std::string& input, const std::string& output, int row, int col) {
  const TicModel model = load_checkpoint(ckpt);
  const auto padded = pad_reflect(read_image(input), ModelConfig::kSpatialMultiple);
  const int h = padded.image.height / 16, w = padded.image.width / 16;
  if (row < 0) row = std::min(h - 1, padded.height / 32);
  if (col < 0) col = std::min(w - 1, padded.width / 32);
  if (row >= h || col >= w) throw UsageError("saliency: latent position outside the " + std::to_string(h) + "x" +
                                             std::to_string(w) + " grid");
  const auto map = train::saliency_map(model, padded.image.to_tensor(), row, col);
  const auto gray = train::to_gray(map);
  std::vector<std::uint8_t> cropped;
  for (int r = 0; r < padded.height; ++r)
    for (int c = 0; c < padded.width; ++c)
      cropped.push_back(gray[static_cast<std::size_t>(r) * padded.image.width + c]);
  write_pgm(output, padded.width, padded.height, cropped);
  return kOk;
}

int run_synth(const std::string& output, int count, int size, std::uint64_t seed) {
  fs::create_directories(output);
  const auto imgs = train::synthetic_images(count, size, seed);
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "synth_%03zu.ppm", i);
    write_ppm(fs::path(output) / name, imgs[i]);
  }
  return kOk;
}

int fail(int code, const std::string& msg) {
  std::cerr << "tic: " << msg << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer-based learned image codec"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train a model (synthetic corpus unless --input is given)");
  train_cmd->add_option("--preset", ta.preset, "model preset");
  train_cmd->add_option("--lambda", ta.lambda, "rate-distortion trade-off (default: the preset's)");
  train_cmd->add_option("--steps", ta.steps, "optimizer steps")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--seed", ta.seed, "seed for init, data order, crops and noise");
  train_cmd->add_option("--batch", ta.batch, "batch size")->check(CLI::PositiveNumber);
  train_cmd->add_option("--crop", ta.crop, "crop size (rounded down to a multiple of 64)")->check(CLI::PositiveNumber);
  train_cmd->add_option("--lr", ta.lr, "Adam learning rate")->check(CLI::PositiveNumber);
  train_cmd->add_option("--input", ta.input, "directory of training images");
  train_cmd->add_option("--synthetic", ta.synthetic, "synthetic image count when no --input")->check(CLI::PositiveNumber);
  train_cmd->add_option("--synthetic-size", ta.synthetic_size, "synthetic image side")->check(CLI::PositiveNumber);
  train_cmd->add_option("--checkpoint", ta.checkpoint, "start from this checkpoint instead of a fresh preset");
  train_cmd->add_option("--output", ta.output, "checkpoint to write")->required();
  train_cmd->add_option("--csv", ta.csv, "per-step metrics CSV");

  std::string ckpt, input, output, csv;
  auto* enc = app.add_subcommand("encode", "compress an image; prints bpp");
  enc->add_option("--checkpoint", ckpt)->required();
  enc->add_option("--input", input, "PPM or PNG image")->required();
  enc->add_option("--output", output, "bitstream file")->required();

  auto* dec = app.add_subcommand("decode", "decompress a bitstream to an image");
  dec->add_option("--checkpoint", ckpt)->required();
  dec->add_option("--input", input, "bitstream file")->required();
  dec->add_option("--output", output, "PPM or PNG image")->required();

  auto* ev = app.add_subcommand("eval", "per-image and mean bpp/PSNR over a directory");
  ev->add_option("--checkpoint", ckpt)->required();
  ev->add_option("--input", input, "image directory")->required();
  ev->add_option("--csv", csv, "CSV output (default stdout)");

  int row = -1, col = -1;
  auto* sal = app.add_subcommand("saliency", "gradient map of one latent position, as a PGM image");
  sal->add_option("--checkpoint", ckpt)->required();
  sal->add_option("--input", input, "PPM or PNG image")->required();
  sal->add_option("--output", output, "PGM file")->required();
  sal->add_option("--row", row, "latent row (default: centre)");
  sal->add_option("--col", col, "latent column (default: centre)");

  int count = 16, size = 64;
  std::uint64_t seed = 0;
  auto* syn = app.add_subcommand("synth", "write the synthetic corpus as PPM files");
  syn->add_option("--output", output, "directory")->required();
  syn->add_option("--count", count)->check(CLI::PositiveNumber);
  syn->add_option("--size", size)->check(CLI::PositiveNumber);
  syn->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return run_train(ta);
    if (*enc) return run_encode(ckpt, input, output);
    if (*dec) return run_decode(ckpt, input, output);
    if (*ev) return run_eval(ckpt, input, csv);
    if (*sal) return run_saliency(ckpt, input, output, row, col);
    if (*syn) return run_synth(output, count, size, seed);
  } catch (const CheckpointError& e) {
    return fail(kCheckpoint, e.what());
  } catch (const codec::ModelMismatchError& e) {
    return fail(kCheckpoint, e.what());
  } catch (const ImageError& e) {
    return fail(kImage, e.what());
  } catch (const FormatError& e) {
    return fail(kStream, e.what());
  } catch (const train::NonFiniteError& e) {
    return fail(kDiverged, e.what());
  } catch (const UsageError& e) {
    return fail(kUsage, e.what());
  } catch (const ContractError& e) {
    return fail(kUsage, e.what());
  } catch (const std::exception& e) {
    return fail(kOther, e.what());
  }
  return kUsage;
}
