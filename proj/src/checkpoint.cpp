// SPDX-License-Identifier: Apache-2.0
// Sectioned checkpoint container: "MPCK", u32 version, u32 section count, then
// per section a 4-byte tag, u64 payload length and the payload.
#include <fstream>
#include <map>
#include <sstream>

#include "mpib/common.hpp"
#include "mpib/model.hpp"

namespace mpib::model {

namespace {

constexpr std::uint32_t kVersion = 1;

void write_string(std::ostream& os, const std::string& s) {
  write_u64_le(os, s.size());
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
  const auto n = read_u64_le(is);
  if (n > (1ull << 32)) throw Error("truncated file");
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (!is) throw Error("truncated file");
  return s;
}

void write_section(std::ostream& os, const char tag[5], const std::string& payload) {
  os.write(tag, 4);
  write_string(os, payload);
}

std::map<std::string, std::string> read_sections(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  expect_magic(is, "MPCK");
  if (read_u32_le(is) != kVersion) throw Error("unsupported checkpoint version");
  const auto n = read_u32_le(is);
  std::map<std::string, std::string> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string tag(4, '\0');
    is.read(tag.data(), 4);
    if (!is) throw Error("truncated file");
    out[tag] = read_string(is);
  }
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, MpibModel& m, const features::GlobalNormStats& norm,
                     const std::string& config_json) {
  std::vector<std::pair<const char*, std::string>> sections;
  sections.emplace_back("CONF", config_json);
  {
    std::ostringstream s;
    write_f64_le(s, norm.mean);
    write_f64_le(s, norm.std);
    write_u64_le(s, norm.n_frames_fitted);
    sections.emplace_back("NORM", s.str());
  }
  {
    std::ostringstream s;
    auto params = m.params();
    for (auto* p : m.tmae.params()) params.push_back(p);
    write_u32_le(s, static_cast<std::uint32_t>(params.size()));
    for (const auto* p : params) {
      write_string(s, p->name);
      write_u32_le(s, static_cast<std::uint32_t>(p->value.rows()));
      write_u32_le(s, static_cast<std::uint32_t>(p->value.cols()));
      for (Eigen::Index i = 0; i < p->value.size(); ++i) write_f64_le(s, p->value.data()[i]);
    }
    sections.emplace_back("PARM", s.str());
  }
  if (m.state.bits() == 4) {
    std::ostringstream s;
    write_mpq4(s, m.state.packed_weights());
    sections.emplace_back("STQ4", s.str());
  }
  {
    std::ostringstream s;
    const auto& w = m.state.weight_scheme();
    write_u32_le(s, static_cast<std::uint32_t>(w.bits));
    write_u32_le(s, static_cast<std::uint32_t>(w.scales.size()));
    for (double v : w.scales) write_f64_le(s, v);
    write_f64_le(s, m.state.act_scale());
    write_f64_le(s, m.state.out_scale());
    write_f64_le(s, m.state.input_scale());
    sections.emplace_back("QSCH", s.str());
  }
  {
    std::ostringstream s;
    const auto& r = m.encoder.activation_ranges();
    write_u32_le(s, static_cast<std::uint32_t>(r.size()));
    for (double v : r) write_f64_le(s, v);
    sections.emplace_back("ENQ8", s.str());
  }

  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path.string());
  write_magic(os, "MPCK");
  write_u32_le(os, kVersion);
  write_u32_le(os, static_cast<std::uint32_t>(sections.size()));
  for (const auto& [tag, payload] : sections) write_section(os, tag, payload);
  if (!os) throw Error("write failed: " + path.string());
}

std::string peek_checkpoint_config(const std::filesystem::path& path) {
  auto s = read_sections(path);
  if (!s.count("CONF")) throw Error("missing section CONF");
  return s["CONF"];
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, MpibModel& m) {
  auto sections = read_sections(path);
  for (const char* tag : {"CONF", "NORM", "PARM", "QSCH", "ENQ8"}) {
    if (!sections.count(tag)) throw Error(std::string("missing section ") + tag);
  }
  LoadedCheckpoint out;
  out.config_json = sections["CONF"];
  {
    std::istringstream s(sections["NORM"]);
    out.norm.mean = read_f64_le(s);
    out.norm.std = read_f64_le(s);
    out.norm.n_frames_fitted = read_u64_le(s);
  }
  {
    std::istringstream s(sections["PARM"]);
    auto params = m.params();
    for (auto* p : m.tmae.params()) params.push_back(p);
    std::map<std::string, nn::Param*> by_name;
    for (auto* p : params) by_name[p->name] = p;
    const auto n = read_u32_le(s);
    for (std::uint32_t i = 0; i < n; ++i) {
      const auto name = read_string(s);
      const auto rows = read_u32_le(s);
      const auto cols = read_u32_le(s);
      auto it = by_name.find(name);
      if (it == by_name.end()) throw Error("unknown parameter " + name);
      nn::Param& p = *it->second;
      if (p.value.rows() != rows || p.value.cols() != cols) throw Error("shape mismatch for " + name);
      for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] = read_f64_le(s);
      by_name.erase(it);
    }
    if (!by_name.empty()) throw Error("missing parameter " + by_name.begin()->first);
  }
  {
    std::istringstream s(sections["QSCH"]);
    const auto bits = static_cast<int>(read_u32_le(s));
    const auto n = read_u32_le(s);
    quant::QuantScheme w;
    if (n > 0) {
      std::vector<double> scales(n);
      for (auto& v : scales) v = read_f64_le(s);
      w = quant::QuantScheme::make(bits, std::move(scales));
    }
    const double act = read_f64_le(s), o = read_f64_le(s), in = read_f64_le(s);
    m.state.set_scales(std::move(w), act, o, in);
  }
  {
    std::istringstream s(sections["ENQ8"]);
    const auto n = read_u32_le(s);
    std::vector<double> r(n);
    for (auto& v : r) v = read_f64_le(s);
    m.encoder.set_activation_ranges(std::move(r));
  }
  return out;
}

}  // namespace mpib::model
