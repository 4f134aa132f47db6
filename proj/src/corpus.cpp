#include "pandora/corpus.hpp"

#include <array>
#include <stdexcept>

#include "corpus_data.hpp"
#include "pandora/assembler.hpp"
#include "pandora/util.hpp"

namespace pandora::corpus {

namespace {

const std::array<ChallengeSpec, 4>& table() {
  static const std::array<ChallengeSpec, 4> specs = {{
      {"greeter", "stack-overflow", data::greeter_pasm, data::greeter_ref_pov},
      {"counter", "none", data::counter_pasm, nullptr},
      {"leaky", "secret-disclosure", data::leaky_pasm, data::leaky_ref_pov},
      {"dataabort", "wild-read", data::dataabort_pasm, nullptr},
  }};
  return specs;
}

}  // namespace

std::span<const ChallengeSpec> challenges() { return table(); }

const ChallengeSpec* find_challenge(std::string_view name) {
  for (const auto& spec : table())
    if (spec.name == name) return &spec;
  return nullptr;
}

pbf::PandoraBinary build_challenge(std::string_view name) {
  const ChallengeSpec* spec = find_challenge(name);
  if (!spec) throw std::out_of_range("unknown challenge '" + std::string(name) + "'");
  return assembler::assemble(spec->source);
}

BuiltCorpus build_corpus() {
  BuiltCorpus out;
  for (const auto& spec : table()) {
    out.binaries[spec.name] = assembler::assemble(spec.source);
    if (spec.ref_pov) out.ref_povs[spec.name] = pov::parse_pov(spec.ref_pov);
  }
  return out;
}

const char* manifest_json() { return data::manifest; }

void write_corpus(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& spec : table()) {
    util::write_text_file(dir / (spec.name + ".pasm"), spec.source);
    const pbf::PandoraBinary binary = assembler::assemble(spec.source);
    util::write_file(dir / (spec.name + ".pbf"), pbf::serialize_binary(binary));
    if (spec.ref_pov)
      util::write_text_file(dir / (spec.name + "_ref.pov"), spec.ref_pov);
  }
  util::write_text_file(dir / "manifest.json", data::manifest);
}

}  // namespace pandora::corpus
