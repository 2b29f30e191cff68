#include "micl/vocab.hpp"

#include "micl/common.hpp"

namespace micl {

int char_token(char c) {
    if (c >= 'a' && c <= 'z') return c - 'a';
    if (c >= '0' && c <= '9') return 26 + (c - '0');
    if (c == ' ') return 36;
    if (c == '-') return 37;
    return -1;
}

char token_char(int id) {
    if (id >= 0 && id <= 25) return static_cast<char>('a' + id);
    if (id >= 26 && id <= 35) return static_cast<char>('0' + (id - 26));
    if (id == 36) return ' ';
    if (id == 37) return '-';
    return '\0';
}

std::vector<int> encode_text(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) {
        const int id = char_token(c);
        if (id < 0) {
            throw PreconditionError(std::string("encode_text: unsupported character '") + c + "'");
        }
        ids.push_back(id);
    }
    return ids;
}

std::string decode_text(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        const char c = token_char(id);
        if (c == '\0') break;
        out.push_back(c);
    }
    return out;
}

const char* control_token_name(int id) {
    switch (id) {
        case kTokBos: return "BOS";
        case kTokEos: return "EOS";
        case kTokSep: return "SEP";
        case kTokAns: return "ANS";
        case kTokImgStart: return "IMG_START";
        case kTokImgEnd: return "IMG_END";
        case kTokPatch: return "PATCH";
        default: return "?";
    }
}

}  // namespace micl
