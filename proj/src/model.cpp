#include "tic/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "tic/bitstream.hpp"
#include "tic/codec.hpp"
#include "tic/ops.hpp"

namespace tic {

using nlohmann::json;

// ---------------------------------------------------------------------------
// ModelConfig

void ModelConfig::validate() const {
  auto fail = [&](const std::string& why) { throw ContractError("ModelConfig '" + name + "': " + why); };
  if (channels < 1) fail("channels must be positive");
  if (main_window < 1 || hyper_window < 1) fail("windows must be positive");
  for (int h : main_heads)
    if (h < 1 || channels % h != 0) fail("main heads must divide channels");
  if (hyper_heads[1] < 1 || channels % hyper_heads[1] != 0) fail("hyper heads must divide channels");
  if (hyper_heads[0] < 1 || hyper_channels() % hyper_heads[0] != 0 || channels % hyper_heads[0] != 0) {
    fail("hyper heads must divide the hyper widths");
  }
  for (int n : main_stb_counts)
    if (n < 1) fail("every NTU needs at least one STB");
  for (int n : hyper_stb_counts)
    if (n < 1) fail("every NTU needs at least one STB");
  if (context_patch < 1 || context_patch % 2 == 0) fail("context patch must be odd");
  if (cam_heads < 1 || channels % cam_heads != 0) fail("CAM heads must divide channels");
  if (mlp_ratio < 1) fail("mlp ratio must be positive");
  if (!(lambda >= 0)) fail("lambda must be nonnegative");
}

std::string ModelConfig::to_json() const {
  json j;
  j["name"] = name;
  j["channels"] = channels;
  j["main_window"] = main_window;
  j["hyper_window"] = hyper_window;
  j["main_heads"] = main_heads;
  j["hyper_heads"] = hyper_heads;
  j["main_stb_counts"] = main_stb_counts;
  j["hyper_stb_counts"] = hyper_stb_counts;
  j["context_patch"] = context_patch;
  j["cam_heads"] = cam_heads;
  j["mlp_ratio"] = mlp_ratio;
  j["lambda"] = lambda;
  j["quant_mode"] = quant_mode == entropy::QuantMode::noise ? "noise" : "round";
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  ModelConfig c;
  try {
    const json j = json::parse(text);
    c.name = j.at("name").get<std::string>();
    c.channels = j.at("channels").get<int>();
    c.main_window = j.at("main_window").get<int>();
    c.hyper_window = j.at("hyper_window").get<int>();
    c.main_heads = j.at("main_heads").get<std::array<int, 3>>();
    c.hyper_heads = j.at("hyper_heads").get<std::array<int, 2>>();
    c.main_stb_counts = j.at("main_stb_counts").get<std::array<int, 3>>();
    c.hyper_stb_counts = j.at("hyper_stb_counts").get<std::array<int, 2>>();
    c.context_patch = j.at("context_patch").get<int>();
    c.cam_heads = j.at("cam_heads").get<int>();
    c.mlp_ratio = j.at("mlp_ratio").get<int>();
    c.lambda = j.at("lambda").get<double>();
    const auto qm = j.at("quant_mode").get<std::string>();
    if (qm != "noise" && qm != "round") throw ContractError("unknown quant_mode '" + qm + "'");
    c.quant_mode = qm == "noise" ? entropy::QuantMode::noise : entropy::QuantMode::round;
  } catch (const json::exception& e) {
    throw ContractError(std::string("ModelConfig: malformed JSON: ") + e.what());
  }
  c.validate();
  return c;
}

std::uint32_t ModelConfig::hash() const {
  std::ostringstream os;
  os << channels << '/' << main_window << '/' << hyper_window;
  for (int v : main_heads) os << '/' << v;
  for (int v : hyper_heads) os << '/' << v;
  for (int v : main_stb_counts) os << '/' << v;
  for (int v : hyper_stb_counts) os << '/' << v;
  os << '/' << context_patch << '/' << cam_heads << '/' << mlp_ratio;
  std::uint32_t h = 2166136261u;
  for (unsigned char ch : os.str()) {
    h ^= ch;
    h *= 16777619u;
  }
  return h;
}

ModelConfig preset(const std::string& name) {
  ModelConfig c;
  c.name = name;
  auto parse_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || used == 0) throw ContractError("unknown preset '" + name + "'");
    return v;
  };

  if (name.rfind("toy-", 0) == 0 || name.rfind("toyplus-", 0) == 0) {
    const bool plus = name[3] == 'p';
    c.channels = parse_int(name.substr(plus ? 8 : 4));
    if (c.channels < 16 || c.channels % 16 != 0) throw ContractError("toy presets need channels divisible by 16");
    c.lambda = 0.013;
    if (plus) c.main_stb_counts = {1, 2, 3};
    c.validate();
    return c;
  }

  const bool plus = name.rfind("ticplus-", 0) == 0;
  if (!plus && name.rfind("tic-", 0) != 0) throw ContractError("unknown preset '" + name + "'");
  const std::string rest = name.substr(plus ? 8 : 4);  // "128-q1"
  const auto dash = rest.find("-q");
  if (dash == std::string::npos) throw ContractError("unknown preset '" + name + "'");
  c.channels = parse_int(rest.substr(0, dash));
  const int q = parse_int(rest.substr(dash + 2));
  const bool valid = (c.channels == 128 && q >= 1 && q <= 4) || (c.channels == 192 && q >= 5 && q <= 8);
  if (!valid) throw ContractError("unknown preset '" + name + "'");
  c.lambda = kLambdaLadder[static_cast<std::size_t>(q - 1)];
  if (plus) c.main_stb_counts = {1, 2, 3};
  c.validate();
  return c;
}

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const char* fam : {"tic", "ticplus"}) {
    for (int q = 1; q <= 8; ++q) out.push_back(std::string(fam) + (q <= 4 ? "-128-q" : "-192-q") + std::to_string(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// TicModel

namespace {

std::vector<swin::SwinBlock> make_blocks(int count, int channels, int window, int heads, int mlp, Rng& rng) {
  std::vector<swin::SwinBlock> v;
  for (int i = 0; i < count; ++i) v.push_back(swin::SwinBlock::make(channels, window, heads, mlp, rng));
  return v;
}

Tensor run_blocks(const std::vector<swin::SwinBlock>& blocks, Tensor x) {
  for (const auto& b : blocks) x = b.forward(x);
  return x;
}

void require_spatial(const Tensor& x, std::int64_t channels, std::int64_t multiple, const char* who) {
  if (x.ndim() != 4 || x.dim(1) != channels) {
    throw ShapeError(std::string(who) + ": expected [N," + std::to_string(channels) + ",H,W], got " +
                     shape_str(x.shape()));
  }
  if (x.dim(2) % multiple != 0 || x.dim(3) % multiple != 0) {
    throw ContractError(std::string(who) + ": spatial extents of " + shape_str(x.shape()) +
                        " must be multiples of " + std::to_string(multiple));
  }
}

}  // namespace

TicModel::TicModel(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(seed);
  const int C = cfg_.channels, mlp = cfg_.mlp_ratio;

  enc_conv_[0] = nn::Conv2d::make(3, C, 3, 2, false, rng);
  for (int i = 0; i < 3; ++i) {
    enc_gdn_[static_cast<std::size_t>(i)] = nn::Gdn::make(C, false);
    enc_stb_[static_cast<std::size_t>(i)] =
        make_blocks(cfg_.main_stb_counts[static_cast<std::size_t>(i)], C, cfg_.main_window,
                    cfg_.main_heads[static_cast<std::size_t>(i)], mlp, rng);
    enc_conv_[static_cast<std::size_t>(i) + 1] = nn::Conv2d::make(C, C, 3, 2, false, rng);
  }

  for (int i = 2; i >= 0; --i) {
    const auto u = static_cast<std::size_t>(i);
    dec_conv_[u + 1] = nn::Conv2d::make(C, C, 3, 2, true, rng);
    dec_gdn_[u] = nn::Gdn::make(C, true);
    dec_stb_[u] = make_blocks(cfg_.main_stb_counts[u], C, cfg_.main_window, cfg_.main_heads[u], mlp, rng);
  }
  dec_conv_[0] = nn::Conv2d::make(C, 3, 3, 2, true, rng);
  // Start reconstructions at mid-grey rather than black.
  std::fill(dec_conv_[0].bias.mutable_data().begin(), dec_conv_[0].bias.mutable_data().end(), 0.5);

  for (int i = 0; i < 2; ++i) {
    const auto u = static_cast<std::size_t>(i);
    hyper_enc_stb_[u] = make_blocks(cfg_.hyper_stb_counts[u], C, cfg_.hyper_window, cfg_.hyper_heads[u], mlp, rng);
    hyper_enc_conv_[u] = nn::Conv2d::make(C, C, 3, 2, false, rng);
  }
  hyper_dec_conv_[1] = nn::Conv2d::make(C, C, 3, 2, true, rng);
  hyper_dec_stb_[1] = make_blocks(cfg_.hyper_stb_counts[1], C, cfg_.hyper_window, cfg_.hyper_heads[1], mlp, rng);
  hyper_dec_conv_[0] = nn::Conv2d::make(C, cfg_.hyper_channels(), 3, 2, true, rng);
  hyper_dec_stb_[0] = make_blocks(cfg_.hyper_stb_counts[0], cfg_.hyper_channels(), cfg_.hyper_window,
                                  cfg_.hyper_heads[0], mlp, rng);

  entropy::Cam::Config cc;
  cc.channels = C;
  cc.hyper_channels = cfg_.hyper_channels();
  cc.patch = cfg_.context_patch;
  cc.heads = cfg_.cam_heads;
  cam_ = entropy::Cam::make(cc, rng);
  prior_ = entropy::FactorizedPrior::make(C, rng);
}

Tensor TicModel::g_a(const Tensor& x) const {
  require_spatial(x, 3, 16, "g_a");
  Tensor t = enc_gdn_[0].forward(enc_conv_[0].forward(x));
  for (std::size_t i = 0; i < 3; ++i) {
    t = enc_conv_[i + 1].forward(run_blocks(enc_stb_[i], t));
    if (i < 2) t = enc_gdn_[i + 1].forward(t);
  }
  return t;
}

Tensor TicModel::g_s(const Tensor& y_hat) const {
  require_spatial(y_hat, cfg_.channels, 1, "g_s");
  Tensor t = y_hat;
  for (int i = 2; i >= 0; --i) {
    const auto u = static_cast<std::size_t>(i);
    t = dec_gdn_[u].forward(dec_conv_[u + 1].forward(t));
    t = run_blocks(dec_stb_[u], t);
  }
  return dec_conv_[0].forward(t);
}

Tensor TicModel::h_a(const Tensor& y) const {
  require_spatial(y, cfg_.channels, 4, "h_a");
  Tensor t = hyper_enc_conv_[0].forward(run_blocks(hyper_enc_stb_[0], y));
  t = ops::leaky_relu(t, nn::kLeakySlope);
  return hyper_enc_conv_[1].forward(run_blocks(hyper_enc_stb_[1], t));
}

Tensor TicModel::h_s(const Tensor& z_hat) const {
  require_spatial(z_hat, cfg_.channels, 1, "h_s");
  Tensor t = ops::leaky_relu(hyper_dec_conv_[1].forward(z_hat), nn::kLeakySlope);
  t = run_blocks(hyper_dec_stb_[1], t);
  t = ops::leaky_relu(hyper_dec_conv_[0].forward(t), nn::kLeakySlope);
  return run_blocks(hyper_dec_stb_[0], t);
}

nn::ParamList TicModel::parameters() const {
  nn::ParamList out;
  auto blocks = [&](const std::string& prefix, const std::vector<swin::SwinBlock>& v) {
    for (std::size_t b = 0; b < v.size(); ++b) v[b].collect(prefix + ".stb" + std::to_string(b), out);
  };
  for (std::size_t i = 0; i < 4; ++i) {
    enc_conv_[i].collect("g_a.conv" + std::to_string(i), out);
    if (i < 3) {
      enc_gdn_[i].collect("g_a.gdn" + std::to_string(i), out);
      blocks("g_a.stage" + std::to_string(i), enc_stb_[i]);
    }
  }
  for (std::size_t i = 0; i < 4; ++i) {
    dec_conv_[i].collect("g_s.tconv" + std::to_string(i), out);
    if (i < 3) {
      dec_gdn_[i].collect("g_s.igdn" + std::to_string(i), out);
      blocks("g_s.stage" + std::to_string(i), dec_stb_[i]);
    }
  }
  for (std::size_t i = 0; i < 2; ++i) {
    blocks("h_a.stage" + std::to_string(i), hyper_enc_stb_[i]);
    hyper_enc_conv_[i].collect("h_a.conv" + std::to_string(i), out);
    hyper_dec_conv_[i].collect("h_s.tconv" + std::to_string(i), out);
    blocks("h_s.stage" + std::to_string(i), hyper_dec_stb_[i]);
  }
  cam_.collect("cam", out);
  prior_.collect("prior", out);
  return out;
}

std::size_t TicModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += static_cast<std::size_t>(t.numel());
  return n;
}

TicModel::Forward TicModel::forward(const Tensor& x, entropy::QuantMode mode, Rng& rng) const {
  Forward f;
  f.y = g_a(x);
  f.z = h_a(f.y);
  if (mode == entropy::QuantMode::noise) {
    f.z_hat = entropy::quantize_noise(f.z, rng);
    f.y_hat = entropy::quantize_noise(f.y, rng);
    const Tensor hyper = h_s(f.z_hat);
    f.params = cam_.forward(f.y_hat, hyper);
  } else {
    f.z_hat = entropy::quantize_round(f.z);
    const Tensor hyper = h_s(f.z_hat);
    codec::LatentCode code = codec::quantize_latent(cam_, f.y, hyper);
    f.y_hat = code.y_hat;
    f.params = {code.mu, code.sigma};
  }
  f.bits_y = entropy::gaussian_bits(f.y_hat, f.params);
  f.bits_z = prior_.bits(f.z_hat);
  f.x_hat = g_s(f.y_hat);
  return f;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kCkptMagic[4] = {'T', 'I', 'C', 'K'};
constexpr std::uint32_t kCkptVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

struct Cursor {
  std::span<const std::uint8_t> in;
  std::size_t pos = 0;
  template <class T>
  T get() {
    if (in.size() - pos < sizeof(T)) throw CheckpointError("checkpoint truncated");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    if (in.size() - pos < n) throw CheckpointError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(in.data() + pos), n);
    pos += n;
    return s;
  }
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

struct ParsedCheckpoint {
  ModelConfig config;
  std::map<std::string, std::pair<Shape, std::vector<double>>> params;
};

ParsedCheckpoint parse_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCkptMagic, 4) != 0) {
    throw CheckpointError("not a TIC checkpoint: " + path.string());
  }
  const std::span<const std::uint8_t> all(bytes);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (stored != crc32(all.first(bytes.size() - 4))) throw CheckpointError("checkpoint checksum mismatch");
  Cursor c{all.first(bytes.size() - 4), 4};
  if (c.get<std::uint32_t>() != kCkptVersion) throw CheckpointError("unsupported checkpoint version");
  ParsedCheckpoint out;
  try {
    out.config = ModelConfig::from_json(c.str(c.get<std::uint32_t>()));
  } catch (const ContractError& e) {
    throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
  }
  const auto count = c.get<std::uint32_t>();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = c.str(c.get<std::uint32_t>());
    const auto rank = c.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("checkpoint tensor rank too large");
    Shape s;
    for (std::uint32_t r = 0; r < rank; ++r) s.push_back(static_cast<std::int64_t>(c.get<std::uint64_t>()));
    const auto n = static_cast<std::size_t>(numel_of(s));
    if ((c.in.size() - c.pos) / sizeof(double) < n) throw CheckpointError("checkpoint truncated");
    std::vector<double> v(n);
    std::memcpy(v.data(), c.in.data() + c.pos, n * sizeof(double));
    c.pos += n * sizeof(double);
    out.params.emplace(std::move(name), std::make_pair(std::move(s), std::move(v)));
  }
  if (c.pos != c.in.size()) throw CheckpointError("trailing bytes in checkpoint");
  return out;
}

void apply(TicModel& model, const ParsedCheckpoint& ck) {
  if (ck.config.hash() != model.config().hash()) {
    throw CheckpointError("checkpoint config '" + ck.config.name + "' does not match model config '" +
                          model.config().name + "'");
  }
  auto params = model.parameters();
  if (params.size() != ck.params.size()) throw CheckpointError("checkpoint parameter count mismatch");
  for (auto& [name, t] : params) {
    auto it = ck.params.find(name);
    if (it == ck.params.end()) throw CheckpointError("checkpoint lacks parameter " + name);
    if (it->second.first != t.shape()) {
      throw CheckpointError("checkpoint shape mismatch for " + name + ": " + shape_str(it->second.first) + " vs " +
                            shape_str(t.shape()));
    }
    std::copy(it->second.second.begin(), it->second.second.end(), t.mutable_data().begin());
  }
}

}  // namespace

void save_checkpoint(const TicModel& model, const std::filesystem::path& path) {
  std::vector<std::uint8_t> out(kCkptMagic, kCkptMagic + 4);
  put(out, kCkptVersion);
  const std::string cfg = model.config().to_json();
  put(out, static_cast<std::uint32_t>(cfg.size()));
  out.insert(out.end(), cfg.begin(), cfg.end());
  const auto params = model.parameters();
  put(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    put(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put(out, static_cast<std::uint32_t>(t.ndim()));
    for (auto d : t.shape()) put(out, static_cast<std::uint64_t>(d));
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + t.data().size() * sizeof(double));
  }
  put(out, crc32(out));
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("failed writing checkpoint " + path.string());
}

TicModel load_checkpoint(const std::filesystem::path& path) {
  const ParsedCheckpoint ck = parse_checkpoint(path);
  TicModel model(ck.config);
  apply(model, ck);
  return model;
}

void load_parameters(TicModel& model, const std::filesystem::path& path) { apply(model, parse_checkpoint(path)); }

}  // namespace tic
