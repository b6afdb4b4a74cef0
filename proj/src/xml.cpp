#include "lmlab/xml.hpp"

#include <cctype>
#include <stdexcept>

namespace lmlab::xml {

std::string_view Node::local_name() const {
    size_t colon = name.rfind(':');
    return colon == std::string::npos ? std::string_view(name)
                                      : std::string_view(name).substr(colon + 1);
}

const std::string* Node::attribute(std::string_view attr_name) const {
    for (const auto& [key, value] : attributes)
        if (key == attr_name) return &value;
    return nullptr;
}

namespace {

struct Parser {
    std::string_view text;
    size_t pos = 0;
    int line = 1;

    [[noreturn]] void fail(const std::string& message) const {
        throw std::runtime_error("xml: line " + std::to_string(line) + ": " + message);
    }

    bool eof() const { return pos >= text.size(); }
    char peek() const { return text[pos]; }

    char take() {
        if (eof()) fail("unexpected end of input");
        char c = text[pos++];
        if (c == '\n') ++line;
        return c;
    }

    bool starts_with(std::string_view prefix) const {
        return text.substr(pos, prefix.size()) == prefix;
    }

    void advance(size_t count) {
        for (size_t i = 0; i < count; ++i) take();
    }

    void skip_ws() {
        while (!eof() && std::isspace(static_cast<unsigned char>(peek()))) take();
    }

    void skip_until(std::string_view terminator) {
        while (!eof() && !starts_with(terminator)) take();
        if (eof()) fail("unterminated construct, expected '" + std::string(terminator) + "'");
        advance(terminator.size());
    }

    static bool name_start(char c) {
        return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == ':';
    }
    static bool name_char(char c) {
        return name_start(c) || std::isdigit(static_cast<unsigned char>(c)) || c == '-' ||
               c == '.';
    }

    std::string read_name() {
        if (eof() || !name_start(peek())) fail("expected name");
        std::string name;
        while (!eof() && name_char(peek())) name += take();
        return name;
    }

    void append_entity(std::string& out) {
        take();  // &
        std::string entity;
        while (!eof() && peek() != ';') {
            entity += take();
            if (entity.size() > 8) fail("bad entity reference");
        }
        take();  // ;
        if (entity == "lt") out += '<';
        else if (entity == "gt") out += '>';
        else if (entity == "amp") out += '&';
        else if (entity == "apos") out += '\'';
        else if (entity == "quot") out += '"';
        else if (entity.size() > 1 && entity[0] == '#') {
            bool hex = entity[1] == 'x' || entity[1] == 'X';
            unsigned long code = 0;
            try {
                code = std::stoul(entity.substr(hex ? 2 : 1), nullptr, hex ? 16 : 10);
            } catch (...) {
                fail("bad character reference &" + entity + ";");
            }
            append_utf8(out, code);
        } else {
            fail("unknown entity &" + entity + ";");
        }
    }

    void append_utf8(std::string& out, unsigned long code) {
        if (code < 0x80) {
            out += static_cast<char>(code);
        } else if (code < 0x800) {
            out += static_cast<char>(0xC0 | (code >> 6));
            out += static_cast<char>(0x80 | (code & 0x3F));
        } else if (code < 0x10000) {
            out += static_cast<char>(0xE0 | (code >> 12));
            out += static_cast<char>(0x80 | ((code >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (code & 0x3F));
        } else if (code < 0x110000) {
            out += static_cast<char>(0xF0 | (code >> 18));
            out += static_cast<char>(0x80 | ((code >> 12) & 0x3F));
            out += static_cast<char>(0x80 | ((code >> 6) & 0x3F));
            out += static_cast<char>(0x80 | (code & 0x3F));
        } else {
            fail("character reference out of range");
        }
    }

    std::string read_attribute_value() {
        if (eof() || (peek() != '"' && peek() != '\'')) fail("expected quoted attribute value");
        char quote = take();
        std::string value;
        while (!eof() && peek() != quote) {
            if (peek() == '&') append_entity(value);
            else value += take();
        }
        take();  // closing quote
        return value;
    }

    // skips <?...?>, <!--...-->, <!DOCTYPE...> (with bracketed subset)
    bool skip_misc() {
        if (starts_with("<?")) {
            skip_until("?>");
            return true;
        }
        if (starts_with("<!--")) {
            advance(4);
            skip_until("-->");
            return true;
        }
        if (starts_with("<!DOCTYPE") || starts_with("<!doctype")) {
            int depth = 0;
            while (!eof()) {
                char c = take();
                if (c == '[') ++depth;
                else if (c == ']') --depth;
                else if (c == '>' && depth == 0) break;
            }
            return true;
        }
        return false;
    }

    Node read_element() {
        take();  // <
        Node node;
        node.kind = Node::Kind::Element;
        node.name = read_name();
        while (true) {
            skip_ws();
            if (eof()) fail("unterminated tag <" + node.name);
            if (peek() == '>') {
                take();
                break;
            }
            if (starts_with("/>")) {
                advance(2);
                return node;
            }
            std::string attr = read_name();
            skip_ws();
            if (eof() || take() != '=') fail("expected = in attribute " + attr);
            skip_ws();
            node.attributes.emplace_back(std::move(attr), read_attribute_value());
        }
        read_content(node);
        return node;
    }

    void read_content(Node& parent) {
        std::string pending_text;
        auto flush_text = [&] {
            if (pending_text.empty()) return;
            Node text_node;
            text_node.kind = Node::Kind::Text;
            text_node.text = std::move(pending_text);
            pending_text.clear();
            parent.children.push_back(std::move(text_node));
        };

        while (true) {
            if (eof()) fail("unterminated element <" + parent.name + ">");
            if (starts_with("</")) {
                flush_text();
                advance(2);
                std::string closing = read_name();
                if (closing != parent.name)
                    fail("mismatched closing tag </" + closing + "> for <" + parent.name + ">");
                skip_ws();
                if (eof() || take() != '>') fail("expected > in closing tag");
                return;
            }
            if (starts_with("<![CDATA[")) {
                advance(9);
                while (!eof() && !starts_with("]]>")) pending_text += take();
                if (eof()) fail("unterminated CDATA section");
                advance(3);
                continue;
            }
            if (skip_misc()) continue;
            if (peek() == '<') {
                flush_text();
                parent.children.push_back(read_element());
                continue;
            }
            if (peek() == '&') append_entity(pending_text);
            else pending_text += take();
        }
    }
};

}  // namespace

Node parse(std::string_view text) {
    Parser p{text};
    p.skip_ws();
    while (!p.eof() && p.skip_misc()) p.skip_ws();
    if (p.eof() || p.peek() != '<') p.fail("expected document element");
    Node root = p.read_element();
    p.skip_ws();
    while (!p.eof() && p.skip_misc()) p.skip_ws();
    if (!p.eof()) p.fail("trailing content after document element");
    return root;
}

}  // namespace lmlab::xml
