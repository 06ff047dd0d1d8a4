#include "promptlab/tokens.hpp"

#include <set>
#include <stdexcept>

namespace promptlab {

SpecialTokenMap SpecialTokenMap::standard(int vocab_size, const std::vector<std::string>& languages) {
  if (languages.empty()) throw std::invalid_argument("special tokens: at least one language required");
  std::set<std::string> unique(languages.begin(), languages.end());
  if (unique.size() != languages.size()) {
    throw std::invalid_argument("special tokens: duplicate language name");
  }
  const int specials = kControlTokens + static_cast<int>(languages.size());
  if (vocab_size < specials + 2) {
    throw std::invalid_argument("special tokens: vocab_size " + std::to_string(vocab_size) +
                                " leaves fewer than 2 text tokens after " + std::to_string(specials) +
                                " special tokens");
  }
  SpecialTokenMap m;
  m.first_special = vocab_size - specials;
  int next = m.first_special;
  m.sot = next++;
  m.eot = next++;
  m.transcribe = next++;
  m.no_timestamps = next++;
  m.prev = next++;
  for (const auto& lang : languages) m.lid[lang] = next++;
  return m;
}

int SpecialTokenMap::lid_for(const std::string& language) const {
  auto it = lid.find(language);
  if (it == lid.end()) throw std::invalid_argument("unknown language: " + language);
  return it->second;
}

std::array<int, kDecoderPrefixLength> build_decoder_prefix(const std::string& language,
                                                           const SpecialTokenMap& tokens) {
  return {tokens.sot, tokens.lid_for(language), tokens.transcribe, tokens.no_timestamps};
}

}  // namespace promptlab
