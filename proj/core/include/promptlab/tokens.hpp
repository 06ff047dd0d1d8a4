#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

namespace promptlab {

/// Special-token layout of the vocabulary. Text tokens occupy
/// [0, first_special); the control tokens and one language-ID token per
/// language fill the tail of the vocabulary.
struct SpecialTokenMap {
  int sot = 0;
  int eot = 0;
  int transcribe = 0;
  int no_timestamps = 0;
  int prev = 0;
  std::map<std::string, int> lid;
  int first_special = 0;

  /// Places SOT, EOT, TRANSCRIBE, NOTIMESTAMPS, PREV, then the LID tokens in
  /// `languages` order at the end of a `vocab_size` vocabulary.
  static SpecialTokenMap standard(int vocab_size, const std::vector<std::string>& languages);

  static constexpr int kControlTokens = 5;

  int lid_for(const std::string& language) const;
  bool is_special(int token) const { return token >= first_special; }
  int special_count() const { return kControlTokens + static_cast<int>(lid.size()); }
};

inline constexpr std::size_t kDecoderPrefixLength = 4;

/// Whisper-style task prefix for transcription without timestamps:
/// [SOT, LID(lang), TRANSCRIBE, NOTIMESTAMPS]. The slot before SOT that
/// would hold previous-context tokens is left to soft prompts.
std::array<int, kDecoderPrefixLength> build_decoder_prefix(const std::string& language,
                                                           const SpecialTokenMap& tokens);

}  // namespace promptlab
