#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <sstream>

#include "egformer/checkpoint.hpp"
#include "egformer/data.hpp"

namespace egf {

namespace {

class HeaderParser {
 public:
  HeaderParser(const std::string& bytes, std::string format)
      : bytes_(bytes), format_(std::move(format)) {}

  [[noreturn]] void fail(const std::string& msg) const {
    throw IoError(format_ + ": " + msg + " at byte offset " + std::to_string(pos_));
  }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      const char c = bytes_[pos_];
      if (c == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::string token(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) ++pos_;
    if (start == pos_) fail(std::string("missing ") + what);
    return bytes_.substr(start, pos_ - start);
  }

  std::size_t extent(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    const std::string t = token(what);
    std::size_t value = 0;
    for (char c : t) {
      if (!std::isdigit(static_cast<unsigned char>(c)) || value > (1u << 24)) {
        pos_ = start;
        fail(std::string("invalid ") + what + " '" + t + "'");
      }
      value = value * 10 + static_cast<std::size_t>(c - '0');
    }
    if (value == 0) {
      pos_ = start;
      fail(std::string(what) + " must be positive");
    }
    return value;
  }

  // Exactly one whitespace byte separates the header from the payload.
  void end_header() {
    if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
      fail("missing separator before pixel data");
    }
    ++pos_;
  }

  void require_payload(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw IoError(format_ + ": truncated pixel data at byte offset " +
                    std::to_string(bytes_.size()) + " (expected " + std::to_string(n) +
                    " bytes from offset " + std::to_string(pos_) + ")");
    }
    if (bytes_.size() - pos_ > n) {
      throw IoError(format_ + ": trailing bytes at byte offset " + std::to_string(pos_ + n));
    }
  }

  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::string format_;
  std::size_t pos_ = 0;
};

std::string encode_netpbm(const char* magic, const Raster& r, std::size_t channels) {
  if (r.channels != channels) {
    throw std::invalid_argument(std::string(magic) + ": expected " + std::to_string(channels) +
                                " channels, got " + std::to_string(r.channels));
  }
  std::string out = std::string(magic) + "\n" + std::to_string(r.width) + " " +
                     std::to_string(r.height) + "\n255\n";
  out.reserve(out.size() + r.data.size());
  for (double v : r.data) out.push_back(static_cast<char>(to_byte(v)));
  return out;
}

Raster decode_netpbm(const std::string& bytes, const char* magic, std::size_t channels) {
  HeaderParser p(bytes, magic);
  if (p.token("magic") != magic) throw IoError(std::string(magic) + ": bad magic at byte offset 0");
  const std::size_t w = p.extent("width");
  const std::size_t h = p.extent("height");
  const std::size_t maxval = p.extent("maxval");
  if (maxval != 255) p.fail("only maxval 255 is supported");
  p.end_header();
  Raster r(h, w, channels);
  p.require_payload(r.data.size());
  for (std::size_t i = 0; i < r.data.size(); ++i) {
    r.data[i] = static_cast<double>(static_cast<unsigned char>(bytes[p.pos() + i])) / 255.0;
  }
  return r;
}

}  // namespace

std::uint8_t to_byte(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

std::string encode_pfm(const Raster& map) {
  if (map.channels != 1) {
    throw std::invalid_argument("pfm: expected a single channel, got " +
                                std::to_string(map.channels));
  }
  std::string out = "Pf\n" + std::to_string(map.width) + " " + std::to_string(map.height) +
                    "\n-1.0\n";
  out.reserve(out.size() + 4 * map.data.size());
  for (std::size_t row = map.height; row-- > 0;) {
    for (std::size_t u = 0; u < map.width; ++u) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(map.at(row, u)));
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
  }
  return out;
}

Raster decode_pfm(const std::string& bytes) {
  HeaderParser p(bytes, "pfm");
  const std::string magic = p.token("magic");
  if (magic == "PF") p.fail("colour PFM is not supported");
  if (magic != "Pf") throw IoError("pfm: bad magic at byte offset 0");
  const std::size_t w = p.extent("width");
  const std::size_t h = p.extent("height");
  const std::size_t scale_at = p.pos();
  const std::string scale_text = p.token("scale");
  double scale = 0.0;
  std::istringstream ss(scale_text);
  if (!(ss >> scale) || !ss.eof() || scale == 0.0 || !std::isfinite(scale)) {
    throw IoError("pfm: invalid scale '" + scale_text + "' at byte offset " +
                  std::to_string(scale_at));
  }
  const bool little = scale < 0.0;
  p.end_header();
  Raster map(h, w, 1);
  p.require_payload(4 * map.data.size());
  std::size_t at = p.pos();
  for (std::size_t row = h; row-- > 0;) {
    for (std::size_t u = 0; u < w; ++u, at += 4) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        const auto byte = static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[at + b]));
        bits |= little ? byte << (8 * b) : byte << (8 * (3 - b));
      }
      map.at(row, u) = static_cast<double>(std::bit_cast<float>(bits));
    }
  }
  return map;
}

void write_pfm(const std::filesystem::path& path, const Raster& map) {
  write_file_atomic(path, encode_pfm(map));
}

Raster read_pfm(const std::filesystem::path& path) {
  try {
    return decode_pfm(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_ppm(const std::filesystem::path& path, const Raster& rgb) {
  write_file_atomic(path, encode_netpbm("P6", rgb, 3));
}

Raster read_ppm(const std::filesystem::path& path) {
  try {
    return decode_netpbm(read_file(path), "P6", 3);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_pgm(const std::filesystem::path& path, const Raster& gray) {
  write_file_atomic(path, encode_netpbm("P5", gray, 1));
}

Raster read_pgm(const std::filesystem::path& path) {
  try {
    return decode_netpbm(read_file(path), "P5", 1);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "scenes", ec);
  if (ec) throw IoError("cannot create " + (dir / "scenes").string() + ": " + ec.message());
  std::string manifest = "id,seed,split\n";
  for (const Sample& s : samples) {
    write_ppm(dir / "scenes" / (s.id + ".ppm"), s.image);
    write_pfm(dir / "scenes" / (s.id + ".pfm"), s.depth);
    manifest += s.id + "," + std::to_string(s.seed) + "," + s.split + "\n";
  }
  write_file_atomic(dir / "manifest.csv", manifest);
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  const std::filesystem::path manifest_path = dir / "manifest.csv";
  std::istringstream manifest(read_file(manifest_path));
  std::string line;
  std::getline(manifest, line);
  if (line != "id,seed,split") {
    throw IoError(manifest_path.string() + ": unexpected header '" + line + "'");
  }
  std::vector<Sample> out;
  std::size_t line_no = 1;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = c1 == std::string::npos ? c1 : line.find(',', c1 + 1);
    if (c2 == std::string::npos) {
      throw IoError(manifest_path.string() + ":" + std::to_string(line_no) + ": expected id,seed,split");
    }
    Sample s;
    s.id = line.substr(0, c1);
    try {
      std::size_t used = 0;
      const std::string seed_text = line.substr(c1 + 1, c2 - c1 - 1);
      s.seed = std::stoull(seed_text, &used);
      if (used != seed_text.size()) throw std::invalid_argument(seed_text);
    } catch (const std::exception&) {
      throw IoError(manifest_path.string() + ":" + std::to_string(line_no) + ": invalid seed");
    }
    s.split = line.substr(c2 + 1);
    s.image = read_ppm(dir / "scenes" / (s.id + ".ppm"));
    s.depth = read_pfm(dir / "scenes" / (s.id + ".pfm"));
    if (s.image.height != s.depth.height || s.image.width != s.depth.width) {
      throw IoError(dir.string() + ": image and depth sizes differ for " + s.id);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace egf
