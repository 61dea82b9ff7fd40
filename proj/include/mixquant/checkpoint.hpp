#pragma once

// Checkpoint container: magic + version, an ASCII header that names every
// tensor with its shape, then the concatenated little-endian float32
// payloads in header order. Checkpoints are written at phase boundaries, so
// no optimizer state is stored (each phase starts a fresh optimizer), and
// the RNG needs no state beyond the seed because every stream is re-derived
// from (seed, purpose, indices). No timestamps or other nondeterminism:
// identical runs produce byte-identical files.

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "binio.hpp"
#include "model.hpp"

namespace mixquant {

struct Checkpoint {
  Model model;
  std::uint64_t seed = 1;
  int phase = 0;  // last completed phase, 0 = calibrated only
};

namespace detail_ckpt {

inline const char kMagic[5] = "MQCK";
constexpr std::uint32_t kVersion = 1;

inline void write_f32_vec(std::ofstream& f, const std::vector<float>& v) {
  write_f32_array(f, v.data(), v.size());
}

inline void read_f32_vec(std::ifstream& f, std::vector<float>& v,
                         std::size_t n) {
  v.assign(n, 0.0f);
  read_f32_array(f, v.data(), n);
}

}  // namespace detail_ckpt

inline void save_checkpoint(const std::string& path, const Model& m,
                            std::uint64_t seed, int phase) {
  std::ofstream f = open_out(path);
  write_magic(f, detail_ckpt::kMagic);
  write_u32(f, detail_ckpt::kVersion);

  std::ostringstream h;
  h << "mixquant-checkpoint " << detail_ckpt::kVersion << "\n";
  h << "seed " << seed << "\n";
  h << "phase " << phase << "\n";
  h << "quant_enabled " << int(m.quant_enabled) << "\n";
  h << "calibrated " << int(m.calibrated) << "\n";
  h << "classes " << m.cfg.classes << "\n";
  h << "input " << m.cfg.input_channels << " " << m.cfg.input_hw << "\n";
  h << "stem " << m.cfg.stem_width << "\n";
  for (const auto& s : m.cfg.stages)
    h << "stage " << s.width << " " << s.depth << " " << s.stride << " "
      << s.expansion << "\n";
  for (const auto& p : m.params) {
    h << "param " << p.name;
    for (int d : p.value.shape) h << " " << d;
    h << "\n";
  }
  const auto units = m.conv_units();
  for (const auto* u : units)
    h << "bn " << u->name << " " << u->out_c << "\n";
  for (const auto& q : m.quants) {
    h << "quant " << q.name << " " << int(q.granularity) << " "
      << int(q.signedness) << " " << int(q.trainable) << " " << q.slices << " "
      << int(q.frozen);
    if (q.frozen)
      for (int b : q.frozen_bits) h << " " << b;
    h << "\n";
  }
  h << "end\n";
  const std::string header = h.str();
  write_u64(f, header.size());
  f.write(header.data(), std::streamsize(header.size()));

  for (const auto& p : m.params)
    write_f32_array(f, p.value.data.data(), p.value.size());
  for (const auto* u : units) {
    detail_ckpt::write_f32_vec(f, u->bn_mean);
    detail_ckpt::write_f32_vec(f, u->bn_var);
  }
  for (const auto& q : m.quants) {
    detail_ckpt::write_f32_vec(f, q.log_d);
    detail_ckpt::write_f32_vec(f, q.log_q);
    if (q.frozen) {
      detail_ckpt::write_f32_vec(f, q.frozen_d);
      detail_ckpt::write_f32_vec(f, q.frozen_q);
    }
  }
  require(f.good(), "checkpoint: write failed for '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f = open_in(path);
  expect_magic(f, detail_ckpt::kMagic, "checkpoint '" + path + "'");
  const std::uint32_t version = read_u32(f);
  require(version == detail_ckpt::kVersion,
          "checkpoint '" + path + "': unsupported version " +
              std::to_string(version));
  const std::uint64_t hlen = read_u64(f);
  std::string header(hlen, '\0');
  f.read(header.data(), std::streamsize(hlen));
  require(f.good(), "checkpoint '" + path + "': truncated header");

  Checkpoint ck;
  MiniConfig cfg;
  cfg.stages.clear();
  int quant_enabled = 1, calibrated = 0;
  struct ParamDecl {
    std::string name;
    std::vector<int> shape;
  };
  struct BnDecl {
    std::string name;
    int channels = 0;
  };
  struct QuantDecl {
    std::string name;
    int granularity = 0, signedness = 0, trainable = 1, slices = 1, frozen = 0;
    std::vector<int> bits;
  };
  std::vector<ParamDecl> pdecl;
  std::vector<BnDecl> bdecl;
  std::vector<QuantDecl> qdecl;

  std::istringstream hs(header);
  std::string line;
  bool saw_end = false;
  bool saw_format = false;
  while (std::getline(hs, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "mixquant-checkpoint") {
      std::uint32_t v = 0;
      ls >> v;
      require(v == detail_ckpt::kVersion,
              "checkpoint '" + path + "': header version mismatch");
      saw_format = true;
    } else if (tag == "seed") {
      ls >> ck.seed;
    } else if (tag == "phase") {
      ls >> ck.phase;
    } else if (tag == "quant_enabled") {
      ls >> quant_enabled;
    } else if (tag == "calibrated") {
      ls >> calibrated;
    } else if (tag == "classes") {
      ls >> cfg.classes;
    } else if (tag == "input") {
      ls >> cfg.input_channels >> cfg.input_hw;
    } else if (tag == "stem") {
      ls >> cfg.stem_width;
    } else if (tag == "stage") {
      MiniStage s;
      ls >> s.width >> s.depth >> s.stride >> s.expansion;
      cfg.stages.push_back(s);
    } else if (tag == "param") {
      ParamDecl d;
      ls >> d.name;
      int v = 0;
      while (ls >> v) d.shape.push_back(v);
      pdecl.push_back(std::move(d));
    } else if (tag == "bn") {
      BnDecl d;
      ls >> d.name >> d.channels;
      bdecl.push_back(std::move(d));
    } else if (tag == "quant") {
      QuantDecl d;
      ls >> d.name >> d.granularity >> d.signedness >> d.trainable >>
          d.slices >> d.frozen;
      if (d.frozen) {
        int b = 0;
        while (ls >> b) d.bits.push_back(b);
        require(int(d.bits.size()) == d.slices,
                "checkpoint '" + path + "': frozen bit list length for " +
                    d.name);
      }
      qdecl.push_back(std::move(d));
    } else if (tag == "end") {
      saw_end = true;
      break;
    } else if (!tag.empty()) {
      fail("checkpoint '" + path + "': unknown header tag '" + tag + "'");
    }
  }
  require(saw_format && saw_end,
          "checkpoint '" + path + "': malformed header");
  cfg.validate();

  // Rebuild the topology, then overwrite every tensor from the payload.
  ck.model = build_mini_model(cfg, /*seed=*/1);
  Model& m = ck.model;
  m.quant_enabled = quant_enabled != 0;
  m.calibrated = calibrated != 0;

  require(pdecl.size() == m.params.size(),
          "checkpoint '" + path + "': parameter count mismatch");
  for (std::size_t i = 0; i < pdecl.size(); ++i) {
    auto& p = m.params[i];
    require(pdecl[i].name == p.name,
            "checkpoint '" + path + "': parameter order mismatch at " +
                pdecl[i].name);
    require(pdecl[i].shape == p.value.shape,
            "checkpoint '" + path + "': shape mismatch for " + p.name);
    read_f32_array(f, p.value.data.data(), p.value.size());
  }
  auto units = m.conv_units();
  require(bdecl.size() == units.size(),
          "checkpoint '" + path + "': batch-norm unit count mismatch");
  for (std::size_t i = 0; i < bdecl.size(); ++i) {
    auto* u = units[i];
    require(bdecl[i].name == u->name && bdecl[i].channels == u->out_c,
            "checkpoint '" + path + "': batch-norm mismatch at " + u->name);
    detail_ckpt::read_f32_vec(f, u->bn_mean, std::size_t(u->out_c));
    detail_ckpt::read_f32_vec(f, u->bn_var, std::size_t(u->out_c));
  }
  require(qdecl.size() == m.quants.size(),
          "checkpoint '" + path + "': quantizer count mismatch");
  for (std::size_t i = 0; i < qdecl.size(); ++i) {
    auto& q = m.quants[i];
    const auto& d = qdecl[i];
    require(d.name == q.name && d.slices == q.slices &&
                d.granularity == int(q.granularity) &&
                d.signedness == int(q.signedness),
            "checkpoint '" + path + "': quantizer mismatch at " + d.name);
    q.trainable = d.trainable != 0;
    detail_ckpt::read_f32_vec(f, q.log_d, std::size_t(q.slices));
    detail_ckpt::read_f32_vec(f, q.log_q, std::size_t(q.slices));
    if (d.frozen) {
      q.frozen = true;
      q.frozen_bits = d.bits;
      detail_ckpt::read_f32_vec(f, q.frozen_d, std::size_t(q.slices));
      detail_ckpt::read_f32_vec(f, q.frozen_q, std::size_t(q.slices));
    }
  }
  require(f.good(), "checkpoint '" + path + "': truncated payload");
  return ck;
}

}  // namespace mixquant
