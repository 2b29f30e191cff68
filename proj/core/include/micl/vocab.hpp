#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace micl {

// Fixed character-level vocabulary.
//
//   ids 0..25   'a'..'z'
//   ids 26..35  '0'..'9'
//   id  36      ' '
//   id  37      '-'
//   ids 38..44  control tokens (below)
//   ids 45..63  reserved, unused by any assembled sequence
//
// Control tokens: BOS starts every sequence, EOS terminates a generated
// answer, SEP closes a demo frame, ANS marks the answer position, IMG_START /
// IMG_END bracket a visual span, and PATCH is the placeholder id carried by
// visual positions (their embeddings come from the patch projection, not the
// token table).
inline constexpr int kTokBos = 38;
inline constexpr int kTokEos = 39;
inline constexpr int kTokSep = 40;
inline constexpr int kTokAns = 41;
inline constexpr int kTokImgStart = 42;
inline constexpr int kTokImgEnd = 43;
inline constexpr int kTokPatch = 44;
inline constexpr int kMinVocab = 45;

// Token id for a text character, or -1 if the character is unsupported.
int char_token(char c);

// Character for a text token id, or '\0' for control/reserved ids.
char token_char(int id);

inline bool is_text_token(int id) { return token_char(id) != '\0'; }
inline bool is_control_token(int id) { return id >= kTokBos && id <= kTokPatch; }

// Throws PreconditionError on characters outside the alphabet.
std::vector<int> encode_text(std::string_view text);

// Concatenates the characters of text tokens; control ids stop the decode.
std::string decode_text(std::span<const int> ids);

const char* control_token_name(int id);

}  // namespace micl
