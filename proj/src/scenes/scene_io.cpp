#include <fstream>
#include <sstream>

#include "asl/binary_io.hpp"
#include "asl/error.hpp"
#include "asl/scenes.hpp"

namespace asl::scenes {

std::vector<std::uint8_t> encode_scene(const Scene& scene) {
  validate_scene(scene);
  io::ByteWriter w;
  w.bytes("ASEG");
  w.u8(kSceneFormatVersion);
  w.u32(static_cast<std::uint32_t>(scene.channels()));
  w.u32(static_cast<std::uint32_t>(scene.height()));
  w.u32(static_cast<std::uint32_t>(scene.width()));
  w.u32(scene.num_classes);
  for (double v : scene.features.data()) w.f64(v);
  for (std::uint16_t l : scene.labels) w.u16(l);
  for (PixelRole r : scene.roles) w.u8(static_cast<std::uint8_t>(r));
  return std::move(w.buffer());
}

Scene decode_scene(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes, "scene file");
  r.expect_magic("ASEG");
  const std::size_t version_at = r.offset();
  if (const std::uint8_t v = r.u8("version"); v != kSceneFormatVersion) {
    r.fail("unsupported version " + std::to_string(v), version_at);
  }
  const std::size_t dims_at = r.offset();
  const std::uint64_t C = r.u32("channels");
  const std::uint64_t H = r.u32("height");
  const std::uint64_t W = r.u32("width");
  const std::uint32_t N = r.u32("num_classes");
  if (C == 0 || H == 0 || W == 0) r.fail("zero image extent", dims_at);
  if (N == 0 || N >= kAnomalyLabel) r.fail("num_classes out of range", dims_at + 12);
  // C, H, W are 32-bit so the products below fit in 64 bits; the payload check bounds them further.
  const std::uint64_t pixels = H * W;
  if (pixels > (std::uint64_t{1} << 40) || C * pixels > (std::uint64_t{1} << 40)) r.fail("shape overflow", dims_at);

  r.need_items(C * pixels, 8, "features");
  std::vector<double> data(C * pixels);
  for (double& v : data) v = r.f64("features");
  r.need_items(pixels, 2, "labels");
  Scene scene;
  scene.num_classes = N;
  scene.labels.resize(pixels);
  for (auto& l : scene.labels) l = r.u16("labels");
  r.need_items(pixels, 1, "roles");
  scene.roles.resize(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::size_t at = r.offset();
    const std::uint8_t role = r.u8("roles");
    if (role > 2) r.fail("invalid role byte " + std::to_string(role), at);
    scene.roles[p] = static_cast<PixelRole>(role);
  }
  r.expect_end();

  try {
    scene.features = grad::Tensor({C, H, W}, std::move(data));
    validate_scene(scene);
  } catch (const InvalidArgument& e) {
    throw FormatError(std::string("scene file: ") + e.what(), bytes.size());
  }
  return scene;
}

void write_scene(const std::filesystem::path& path, const Scene& scene) { io::write_file(path, encode_scene(scene)); }

Scene read_scene(const std::filesystem::path& path) {
  try {
    return decode_scene(io::read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ostringstream out;
  for (const ManifestEntry& e : entries) {
    out << e.split << ' ' << e.path;
    if (e.adversarial_class) out << ' ' << *e.adversarial_class;
    out << '\n';
  }
  io::write_text(path, out.str());
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t offset = 0;
  while (std::getline(in, line)) {
    const std::size_t line_start = offset;
    offset += line.size() + 1;
    if (line.empty()) continue;
    std::istringstream fields(line);
    ManifestEntry e;
    if (!(fields >> e.split >> e.path)) throw FormatError(path.string() + ": malformed manifest line", line_start);
    if (long adv; fields >> adv) {
      if (adv < 0 || adv >= kAnomalyLabel) throw FormatError(path.string() + ": adversarial class out of range", line_start);
      e.adversarial_class = static_cast<std::uint16_t>(adv);
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace asl::scenes
